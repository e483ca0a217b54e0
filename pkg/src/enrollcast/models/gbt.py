"""Histogram-based gradient-boosted regression trees.

Trees are grown depth-wise with second-order (gradient/hessian) split gains

    G_L^2/(H_L + lambda) + G_R^2/(H_R + lambda) - G^2/(H + lambda)

and Newton leaf values -G/(H + lambda). Missing values live in a dedicated
bin and follow whichever child the split search found better. Supported
losses: tweedie (log link, prediction exp(score)) and pinball (identity link,
quantile leaf refit).
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numba
import numpy as np

from .tweedie import tweedie_grad_hess

logger = logging.getLogger(__name__)

MU_FLOOR = 1e-8


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TweedieLoss:
    power: float = 1.5
    name = "tweedie"

    def __post_init__(self):
        if not 1.0 < self.power < 2.0:
            raise ValueError("tweedie power must lie in (1, 2)")

    def base_score(self, y, w) -> float:
        return float(np.log(max(np.average(y, weights=w), MU_FLOOR)))

    def grad_hess(self, y, score):
        return tweedie_grad_hess(y, score, self.power)

    def transform(self, score):
        return np.exp(score)

    def to_dict(self):
        return {"name": "tweedie", "power": self.power}


@dataclass(frozen=True)
class PinballLoss:
    """Quantile loss; leaves are refit to the tau-quantile of residuals."""

    tau: float = 0.5
    name = "pinball"

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")

    def base_score(self, y, w) -> float:
        return float(np.quantile(y, self.tau))

    def grad_hess(self, y, score):
        g = np.where(y < score, 1.0 - self.tau, -self.tau)
        return g, np.ones_like(g)

    def transform(self, score):
        return score

    def to_dict(self):
        return {"name": "pinball", "tau": self.tau}


def loss_from_dict(d: dict):
    if d["name"] == "tweedie":
        return TweedieLoss(d["power"])
    if d["name"] == "pinball":
        return PinballLoss(d["tau"])
    raise ValueError(f"unknown loss {d['name']!r}")


@dataclass(frozen=True)
class GBTParams:
    n_rounds: int = 500
    learning_rate: float = 0.1
    max_depth: int = 6
    lambda_reg: float = 1.0
    min_child_weight: float = 1e-3
    min_samples_leaf: int = 20
    min_split_gain: float = 0.0
    max_bins: int = 256
    subsample: float = 1.0
    colsample: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 2 < self.max_bins <= 256:
            raise ValueError("max_bins must lie in (2, 256]")
        if self.max_depth < 1 or self.n_rounds < 0:
            raise ValueError("max_depth >= 1 and n_rounds >= 0 required")


# ---------------------------------------------------------------------------
# binning
# ---------------------------------------------------------------------------

@dataclass
class BinMapper:
    """Per-feature split thresholds; bin(x) = #thresholds < x, NaN -> last bin."""

    thresholds: list[np.ndarray]
    max_bins: int

    @property
    def missing_bin(self) -> int:
        return self.max_bins - 1

    @classmethod
    def fit(cls, X: np.ndarray, max_bins: int = 256) -> "BinMapper":
        cap = max_bins - 1  # non-missing bins
        out = []
        for j in range(X.shape[1]):
            col = X[:, j]
            col = col[~np.isnan(col)]
            vals = np.unique(col)
            if vals.size <= cap:
                thr = (vals[:-1] + vals[1:]) / 2.0
            else:
                qs = np.quantile(col, np.linspace(0, 1, cap + 1)[1:-1], method="inverted_cdf")
                thr = np.unique(qs)
                thr = thr[thr < vals[-1]]
            out.append(np.ascontiguousarray(thr, dtype=np.float64))
        return cls(out, max_bins)

    def transform(self, X: np.ndarray) -> np.ndarray:
        """Binned matrix of shape (n_features, n_rows), uint8."""
        n, f = X.shape
        out = np.empty((f, n), dtype=np.uint8)
        for j in range(f):
            col = X[:, j]
            b = np.searchsorted(self.thresholds[j], col, side="left")
            b[np.isnan(col)] = self.missing_bin
            out[j] = b
        return out


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _histograms(binned, rows, grad, hess, n_bins):
    n_feat = binned.shape[0]
    hg = np.zeros((n_feat, n_bins))
    hh = np.zeros((n_feat, n_bins))
    hc = np.zeros((n_feat, n_bins), dtype=np.int64)
    for f in range(n_feat):
        col = binned[f]
        for i in range(rows.shape[0]):
            r = rows[i]
            b = col[r]
            hg[f, b] += grad[r]
            hh[f, b] += hess[r]
            hc[f, b] += 1
    return hg, hh, hc


@numba.njit(cache=True)
def _partition(col, idx, thr_bin, missing_left, missing_bin):
    left = np.empty(idx.shape[0], dtype=np.int64)
    right = np.empty(idx.shape[0], dtype=np.int64)
    nl = 0
    nr = 0
    for i in range(idx.shape[0]):
        r = idx[i]
        b = col[r]
        go_left = missing_left if b == missing_bin else b <= thr_bin
        if go_left:
            left[nl] = r
            nl += 1
        else:
            right[nr] = r
            nr += 1
    return left[:nl], right[:nr]


@numba.njit(cache=True)
def _apply_binned(binned, feature, thr_bin, missing_left, left, right, value, missing_bin):
    n = binned.shape[1]
    out = np.empty(n)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            b = binned[feature[node], i]
            if b == missing_bin:
                go_left = missing_left[node]
            else:
                go_left = b <= thr_bin[node]
            node = left[node] if go_left else right[node]
        out[i] = value[node]
    return out


@numba.njit(cache=True)
def _leaf_index_binned(binned, feature, thr_bin, missing_left, left, right, missing_bin):
    n = binned.shape[1]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            b = binned[feature[node], i]
            if b == missing_bin:
                go_left = missing_left[node]
            else:
                go_left = b <= thr_bin[node]
            node = left[node] if go_left else right[node]
        out[i] = node
    return out


@numba.njit(cache=True)
def _predict_raw(X, features, thresholds, missing_left, lefts, rights, values, offsets):
    n = X.shape[0]
    out = np.zeros(n)
    n_trees = offsets.shape[0] - 1
    for i in range(n):
        s = 0.0
        for t in range(n_trees):
            base = offsets[t]
            node = 0
            while features[base + node] >= 0:
                x = X[i, features[base + node]]
                if np.isnan(x):
                    go_left = missing_left[base + node]
                else:
                    go_left = x <= thresholds[base + node]
                node = lefts[base + node] if go_left else rights[base + node]
            s += values[base + node]
        out[i] = s
    return out


# ---------------------------------------------------------------------------
# trees
# ---------------------------------------------------------------------------

@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    threshold_bin: np.ndarray
    missing_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": [float(v) for v in self.threshold],
            "threshold_bin": self.threshold_bin.tolist(),
            "missing_left": [bool(v) for v in self.missing_left],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": [float(v) for v in self.value],
            "gain": [float(v) for v in self.gain],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            np.asarray(d["feature"], np.int64), np.asarray(d["threshold"], np.float64),
            np.asarray(d["threshold_bin"], np.int64), np.asarray(d["missing_left"], np.bool_),
            np.asarray(d["left"], np.int64), np.asarray(d["right"], np.int64),
            np.asarray(d["value"], np.float64), np.asarray(d["gain"], np.float64),
        )


@numba.njit(cache=True)
def _best_split_kernel(hg, hh, hc, n_bins_per_feature, feature_mask, lam, min_leaf,
                       min_child_weight):
    n_feat, n_bins = hg.shape
    miss = n_bins - 1
    G = 0.0
    H = 0.0
    C = 0
    for b in range(n_bins):
        G += hg[0, b]
        H += hh[0, b]
        C += hc[0, b]
    parent = G * G / (H + lam)
    best_gain = -np.inf
    best_f, best_b, best_d = -1, -1, 0
    for f in range(n_feat):
        if not feature_mask[f]:
            continue
        gm, hm, cm = hg[f, miss], hh[f, miss], hc[f, miss]
        for d in range(2):
            gl = gm if d == 0 else 0.0
            hl = hm if d == 0 else 0.0
            cl = cm if d == 0 else 0
            for b in range(n_bins_per_feature[f] - 1):
                gl += hg[f, b]
                hl += hh[f, b]
                cl += hc[f, b]
                gr = G - gl
                hr = H - hl
                cr = C - cl
                if cl < min_leaf or cr < min_leaf or hl < min_child_weight or hr < min_child_weight:
                    continue
                gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent)
                if gain > best_gain:
                    best_gain, best_f, best_b, best_d = gain, f, b, d
    return best_f, best_b, best_d, best_gain


@dataclass(frozen=True)
class Split:
    feature: int
    bin: int
    missing_left: bool
    gain: float


def best_split(hg, hh, hc, n_bins_per_feature, params: GBTParams,
               feature_mask=None) -> Split | None:
    """Best second-order split from node histograms (rows: features, cols: bins;
    the last column is the missing bin). Ties go to the lowest feature, then
    missing-left, then the lowest threshold."""
    if feature_mask is None:
        feature_mask = np.ones(hg.shape[0], dtype=np.bool_)
    f, b, d, gain = _best_split_kernel(hg, hh, hc, n_bins_per_feature, feature_mask,
                                       params.lambda_reg, params.min_samples_leaf,
                                       params.min_child_weight)
    if f < 0 or not gain > params.min_split_gain:
        return None
    return Split(int(f), int(b), d == 0, float(gain))


def _grow_tree(binned, mapper: BinMapper, n_bins_per_feature, grad, hess, rows,
               params: GBTParams, leaf_fn, feature_mask) -> Tree:
    n_bins = mapper.max_bins
    feature, thr, thr_bin, mleft, left, right, value, gains = ([] for _ in range(8))

    def new_node():
        for lst, v in ((feature, -1), (thr, np.nan), (thr_bin, -1), (mleft, False),
                       (left, -1), (right, -1), (value, 0.0), (gains, 0.0)):
            lst.append(v)
        return len(feature) - 1

    root = new_node()
    hist = _histograms(binned, rows, grad, hess, n_bins)
    frontier = [(root, rows, hist, 0)]
    while frontier:
        nxt = []
        for node, idx, (hg, hh, hc), depth in frontier:
            split = None
            if depth < params.max_depth and idx.size >= 2 * params.min_samples_leaf:
                split = best_split(hg, hh, hc, n_bins_per_feature, params, feature_mask)
            if split is None:
                value[node] = leaf_fn(idx, hg[0].sum(), hh[0].sum())
                continue
            li, ri = _partition(binned[split.feature], idx, split.bin, split.missing_left,
                                mapper.missing_bin)
            feature[node] = split.feature
            thr_bin[node] = split.bin
            thr[node] = mapper.thresholds[split.feature][split.bin]
            mleft[node] = split.missing_left
            gains[node] = split.gain
            ln, rn = new_node(), new_node()
            left[node], right[node] = ln, rn
            # histogram subtraction: build the smaller child, derive the other
            small, large = (li, ri) if li.size <= ri.size else (ri, li)
            hs = _histograms(binned, small, grad, hess, n_bins)
            hl_ = (hg - hs[0], hh - hs[1], hc - hs[2])
            hist_l, hist_r = (hs, hl_) if small is li else (hl_, hs)
            nxt.append((ln, li, hist_l, depth + 1))
            nxt.append((rn, ri, hist_r, depth + 1))
        frontier = nxt
    return Tree(np.asarray(feature, np.int64), np.asarray(thr, np.float64),
                np.asarray(thr_bin, np.int64), np.asarray(mleft, np.bool_),
                np.asarray(left, np.int64), np.asarray(right, np.int64),
                np.asarray(value, np.float64), np.asarray(gains, np.float64))


@dataclass
class GBTModel:
    trees: list[Tree]
    learning_rate: float
    base_score: float
    loss: object
    params: GBTParams
    schema_hash: str = ""
    feature_names: list[str] = field(default_factory=list)
    family: str = "gbt"

    def raw_score(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if not self.trees:
            return np.full(X.shape[0], self.base_score)
        offsets = np.cumsum([0] + [t.n_nodes for t in self.trees])
        cat = lambda name: np.concatenate([getattr(t, name) for t in self.trees])  # noqa: E731
        # child indices stay tree-local; the kernel adds each tree's offset
        s = _predict_raw(X, cat("feature"), cat("threshold"), cat("missing_left"),
                         cat("left"), cat("right"), cat("value"), offsets.astype(np.int64))
        return self.base_score + s

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.loss.transform(self.raw_score(X))

    def feature_importance(self) -> dict[str, float]:
        """Total split gain per feature, normalised to sum to one."""
        n = len(self.feature_names) or 1 + max((t.feature.max() for t in self.trees), default=0)
        imp = np.zeros(n)
        for t in self.trees:
            m = t.feature >= 0
            np.add.at(imp, t.feature[m], t.gain[m])
        if imp.sum() > 0:
            imp /= imp.sum()
        names = self.feature_names or [f"f{i}" for i in range(n)]
        return dict(zip(names, imp))

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "learning_rate": self.learning_rate,
            "base_score": self.base_score,
            "loss": self.loss.to_dict(),
            "params": asdict(self.params),
            "schema_hash": self.schema_hash,
            "feature_names": list(self.feature_names),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GBTModel":
        return cls([Tree.from_dict(t) for t in d["trees"]], d["learning_rate"], d["base_score"],
                   loss_from_dict(d["loss"]), GBTParams(**d["params"]), d["schema_hash"],
                   list(d["feature_names"]), d.get("family", "gbt"))

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def fit_gbt(X: np.ndarray, y: np.ndarray, loss=None, params: GBTParams | None = None,
            sample_weight=None, schema_hash: str = "", feature_names=None) -> GBTModel:
    """Boost regression trees on (X, y).

    ``X`` may contain NaN (routed to a learned default child). Fitting is
    deterministic given ``params.seed``.
    """
    loss = loss or TweedieLoss()
    params = params or GBTParams()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be 2-D with one row per target")
    if np.any(y < 0) and isinstance(loss, TweedieLoss):
        raise ValueError("tweedie targets must be non-negative")
    w = np.ones_like(y) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    names = list(feature_names) if feature_names is not None else []
    base = loss.base_score(y, w)
    if isinstance(loss, TweedieLoss) and not np.any(y > 0):
        logger.warning("all-zero targets under tweedie loss: returning constant model")
        return GBTModel([], params.learning_rate, float(np.log(MU_FLOOR)), loss, params,
                        schema_hash, names)

    mapper = BinMapper.fit(X, params.max_bins)
    binned = mapper.transform(X)
    n_bins_per_feature = np.array([t.size + 1 for t in mapper.thresholds], dtype=np.int64)
    rng = np.random.default_rng(params.seed)
    n = y.size
    all_rows = np.arange(n, dtype=np.int64)
    score = np.full(n, base)
    trees: list[Tree] = []
    pinball = isinstance(loss, PinballLoss)

    for _ in range(params.n_rounds):
        g, h = loss.grad_hess(y, score)
        g = np.ascontiguousarray(g * w)
        h = np.ascontiguousarray(h * w)
        rows = all_rows
        if params.subsample < 1.0:
            rows = np.sort(rng.choice(n, size=max(1, int(params.subsample * n)), replace=False))
        fmask = None
        if params.colsample < 1.0:
            k = max(1, int(round(params.colsample * X.shape[1])))
            fmask = np.zeros(X.shape[1], bool)
            fmask[rng.choice(X.shape[1], size=k, replace=False)] = True

        if pinball:
            resid = y - score

            def leaf_fn(idx, G, H, resid=resid):
                return params.learning_rate * float(np.quantile(resid[idx], loss.tau))
        else:
            def leaf_fn(idx, G, H):
                return -params.learning_rate * G / (H + params.lambda_reg)

        tree = _grow_tree(binned, mapper, n_bins_per_feature, g, h, rows, params, leaf_fn, fmask)
        trees.append(tree)
        score += _apply_binned(binned, tree.feature, tree.threshold_bin, tree.missing_left,
                               tree.left, tree.right, tree.value, mapper.missing_bin)
    return GBTModel(trees, params.learning_rate, base, loss, params, schema_hash, names)


def first_split_rows(model: GBTModel, X: np.ndarray):
    """(feature, boolean left-mask) of the first tree's root split, or None."""
    if not model.trees or model.trees[0].feature[0] < 0:
        return None
    t = model.trees[0]
    f = int(t.feature[0])
    x = np.asarray(X, dtype=np.float64)[:, f]
    left = np.where(np.isnan(x), t.missing_left[0], x <= t.threshold[0])
    return f, left
