"""Regressors for the BC target: regularized gradient-boosted trees, a
bagged forest, and an ordinary-least-squares baseline.

One exact-greedy tree grower serves all ensemble roles. Boosting uses the
second-order machinery for squared error (gradient = prediction - target,
unit hessian): split gain

    1/2 [ G_L^2/(H_L+lam) + G_R^2/(H_R+lam) - (G_L+G_R)^2/(H_L+H_R+lam) ]

and leaf weight -G/(H+lam). With lam > 0 this is the regularized boosting
configuration; lam = 0 gives plain gradient boosting; fitting -y with
zero initial prediction makes the same grower a variance-reduction tree
for the forest. Thresholds sit at midpoints between consecutive distinct
feature values and all tie-breaks are deterministic, so fits do not
depend on row order. Rows with a missing feature value follow the split's
default side, chosen during fitting as the side that gains more.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BadK, BadParams, GridEmpty, SchemaMismatch, SingularDesign, TooFewRows


@dataclass(frozen=True)
class GbtHyperParams:
    n_estimators: int = 50
    learning_rate: float = 0.05
    max_depth: int = 5
    lam: float = 1.0               # leaf L2 regularization
    min_split_gain: float = 0.0
    min_samples_split: int = 2

    def __post_init__(self):
        if self.n_estimators < 1 or self.max_depth < 1:
            raise BadParams("n_estimators and max_depth must be >= 1")
        if not 0.0 < self.learning_rate <= 1.0:
            raise BadParams("learning_rate must lie in (0, 1]")
        if self.lam < 0 or self.min_split_gain < 0 or self.min_samples_split < 2:
            raise BadParams("lam, min_split_gain >= 0 and min_samples_split >= 2")


@dataclass
class TreeNode:
    feature: int | None = None
    threshold: float | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    default_left: bool = True
    weight: float | None = None        # set on leaves only

    @property
    def is_leaf(self):
        return self.weight is not None


def _canonical_sum(a):
    return float(np.sum(np.sort(a)))


def _grow_tree(X, g, h, idx, depth, params: GbtHyperParams):
    G = _canonical_sum(g[idx])
    H = _canonical_sum(h[idx])

    def leaf():
        return TreeNode(weight=-G / (H + params.lam))

    if depth >= params.max_depth or len(idx) < params.min_samples_split:
        return leaf()

    lam = params.lam
    parent_score = G * G / (H + lam)
    best = None       # (gain, feature, threshold, default_left)
    for f in range(X.shape[1]):
        col = X[idx, f]
        present = ~np.isnan(col)
        if present.sum() < 2:
            continue
        pidx = idx[present]
        vals = X[pidx, f]
        order = np.lexsort((g[pidx], vals))
        vals = vals[order]
        gs = np.cumsum(g[pidx][order])
        hs = np.cumsum(h[pidx][order])
        cuts = np.flatnonzero(np.diff(vals) > 0)
        if len(cuts) == 0:
            continue
        Gm = _canonical_sum(g[idx[~present]])
        Hm = _canonical_sum(h[idx[~present]])

        GL, HL = gs[cuts], hs[cuts]
        GR, HR = gs[-1] - GL, hs[-1] - HL
        gain_l = 0.5 * ((GL + Gm) ** 2 / (HL + Hm + lam) + GR ** 2 / (HR + lam)
                        - parent_score)
        gain_r = 0.5 * (GL ** 2 / (HL + lam) + (GR + Gm) ** 2 / (HR + Hm + lam)
                        - parent_score)
        take_left = gain_l >= gain_r
        gains = np.where(take_left, gain_l, gain_r)
        j = int(np.argmax(gains))
        cand = (float(gains[j]), f, (vals[cuts[j]] + vals[cuts[j] + 1]) / 2.0,
                bool(take_left[j]))
        if best is None or cand[0] > best[0]:
            best = cand

    if best is None or best[0] <= params.min_split_gain:
        return leaf()

    gain, f, threshold, default_left = best
    col = X[idx, f]
    missing = np.isnan(col)
    goes_left = np.where(missing, default_left, col <= threshold)
    node = TreeNode(feature=f, threshold=float(threshold), default_left=default_left)
    node.left = _grow_tree(X, g, h, idx[goes_left], depth + 1, params)
    node.right = _grow_tree(X, g, h, idx[~goes_left], depth + 1, params)
    return node


def _tree_predict(node: TreeNode, X):
    out = np.empty(len(X))
    stack = [(node, np.arange(len(X)))]
    while stack:
        nd, idx = stack.pop()
        if len(idx) == 0:
            continue
        if nd.is_leaf:
            out[idx] = nd.weight
            continue
        col = X[idx, nd.feature]
        missing = np.isnan(col)
        goes_left = np.where(missing, nd.default_left, col <= nd.threshold)
        stack.append((nd.left, idx[goes_left]))
        stack.append((nd.right, idx[~goes_left]))
    return out


@dataclass
class GbtModel:
    base_score: float
    trees: list[TreeNode]
    learning_rate: float
    feature_names: list[str]
    params: GbtHyperParams
    train_rmse_per_round: list[float] = field(default_factory=list)

    def predict(self, X, names=None):
        X = _check_schema(X, names, self.feature_names)
        out = np.full(len(X), self.base_score)
        for tree in self.trees:
            out += self.learning_rate * _tree_predict(tree, X)
        return out

    def staged_predict(self, X, checkpoints, names=None):
        """Predictions after each tree count in ``checkpoints`` (sorted)."""
        X = _check_schema(X, names, self.feature_names)
        out = np.full(len(X), self.base_score)
        results = {}
        marks = set(checkpoints)
        if 0 in marks:
            results[0] = out.copy()
        for m, tree in enumerate(self.trees, start=1):
            out += self.learning_rate * _tree_predict(tree, X)
            if m in marks:
                results[m] = out.copy()
        return results


@dataclass
class ForestModel:
    trees: list[TreeNode]
    feature_names: list[str]
    n_trees: int
    max_depth: int | None
    min_samples_split: int
    seed: int
    bootstrap: bool = True
    bootstrap_indices: list = field(default_factory=list)   # fit-time only

    def predict(self, X, names=None):
        X = _check_schema(X, names, self.feature_names)
        acc = np.zeros(len(X))
        for tree in self.trees:
            acc += _tree_predict(tree, X)
        return acc / len(self.trees)

    def oob_predictions(self, X, names=None):
        """Per-row mean over the trees that never saw the row; NaN when
        every tree saw it. Available on freshly fitted models only."""
        X = _check_schema(X, names, self.feature_names)
        if len(self.bootstrap_indices) != len(self.trees):
            raise BadParams("bootstrap indices not available on this model")
        total = np.zeros(len(X))
        hits = np.zeros(len(X))
        for tree, idx in zip(self.trees, self.bootstrap_indices):
            out_of_bag = np.ones(len(X), dtype=bool)
            out_of_bag[np.unique(idx)] = False
            if out_of_bag.any():
                total[out_of_bag] += _tree_predict(tree, X[out_of_bag])
                hits[out_of_bag] += 1
        with np.errstate(invalid="ignore"):
            return np.where(hits > 0, total / np.maximum(hits, 1), np.nan)


@dataclass
class LinearModel:
    intercept: float
    coefficients: np.ndarray
    feature_names: list[str]

    def predict(self, X, names=None):
        X = _check_schema(X, names, self.feature_names)
        return self.intercept + np.nan_to_num(X, nan=0.0) @ self.coefficients


def _check_schema(X, names, expected):
    if names is not None and list(names) != list(expected):
        raise SchemaMismatch(f"feature names {list(names)} != fit-time {list(expected)}")
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != len(expected):
        raise SchemaMismatch(f"{X.shape[1]} columns against {len(expected)} features")
    return X


# ---------------------------------------------------------------------------
# fitting

def fit_gbt(X, y, params: GbtHyperParams = GbtHyperParams(),
            feature_names=None, seed=0) -> GbtModel:
    """Boosted squared-error ensemble; training RMSE recorded per round."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(X) < 2:
        raise BadParams("need at least 2 rows")
    names = list(feature_names) if feature_names else [f"f{i}" for i in range(X.shape[1])]
    base = float(np.mean(np.sort(y)))    # canonical order: invariant to row order
    pred = np.full(len(y), base)
    h = np.ones(len(y))
    idx = np.arange(len(y))
    trees = []
    rmse_per_round = []
    for _ in range(params.n_estimators):
        g = pred - y
        tree = _grow_tree(X, g, h, idx, 0, params)
        trees.append(tree)
        pred += params.learning_rate * _tree_predict(tree, X)
        rmse_per_round.append(float(np.sqrt(np.mean((pred - y) ** 2))))
    return GbtModel(base_score=base, trees=trees, learning_rate=params.learning_rate,
                    feature_names=names, params=params,
                    train_rmse_per_round=rmse_per_round)


def fit_forest(X, y, n_trees=100, max_depth=None, min_samples_split=2,
               seed=0, bootstrap=True, feature_names=None) -> ForestModel:
    """Bagged variance-reduction trees; prediction is the tree mean."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(X) < 2 or n_trees < 1:
        raise BadParams("need at least 2 rows and 1 tree")
    names = list(feature_names) if feature_names else [f"f{i}" for i in range(X.shape[1])]
    depth = max_depth if max_depth is not None else len(X)
    params = GbtHyperParams(n_estimators=1, learning_rate=1.0, max_depth=depth,
                            lam=0.0, min_samples_split=min_samples_split)
    rng = np.random.default_rng(seed)
    h = np.ones(len(y))
    trees = []
    picks = []
    for _ in range(n_trees):
        idx = rng.integers(0, len(y), len(y)) if bootstrap else np.arange(len(y))
        picks.append(idx)
        trees.append(_grow_tree(X[idx], -y[idx], h[: len(idx)],
                                np.arange(len(idx)), 0, params))
    return ForestModel(trees=trees, feature_names=names, n_trees=n_trees,
                       max_depth=max_depth, min_samples_split=min_samples_split,
                       seed=seed, bootstrap=bootstrap, bootstrap_indices=picks)


def fit_linear(X, y, feature_names=None) -> LinearModel:
    """Least squares with the minimum-norm solution on rank deficiency."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.size == 0 or len(y) == 0:
        raise SingularDesign("empty design matrix")
    names = list(feature_names) if feature_names else [f"f{i}" for i in range(X.shape[1])]
    A = np.column_stack([np.ones(len(X)), np.nan_to_num(X, nan=0.0)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return LinearModel(intercept=float(coef[0]), coefficients=coef[1:],
                       feature_names=names)


def predict(model, X, names=None):
    return model.predict(X, names=names)


# ---------------------------------------------------------------------------
# serialization

def _node_to_obj(node: TreeNode):
    if node.is_leaf:
        return {"weight": node.weight}
    return {
        "feature": node.feature, "threshold": node.threshold,
        "default": "left" if node.default_left else "right",
        "left": _node_to_obj(node.left), "right": _node_to_obj(node.right),
    }


def _node_from_obj(obj):
    if "weight" in obj:
        return TreeNode(weight=float(obj["weight"]))
    return TreeNode(feature=int(obj["feature"]), threshold=float(obj["threshold"]),
                    default_left=obj.get("default", "left") == "left",
                    left=_node_from_obj(obj["left"]),
                    right=_node_from_obj(obj["right"]))


def model_to_obj(model):
    if isinstance(model, GbtModel):
        return {
            "format": "bctrace-model", "version": 1, "kind": "gbt",
            "base_score": model.base_score, "learning_rate": model.learning_rate,
            "feature_names": model.feature_names,
            "params": {
                "n_estimators": model.params.n_estimators,
                "learning_rate": model.params.learning_rate,
                "max_depth": model.params.max_depth,
                "lam": model.params.lam,
                "min_split_gain": model.params.min_split_gain,
                "min_samples_split": model.params.min_samples_split,
            },
            "trees": [_node_to_obj(t) for t in model.trees],
        }
    if isinstance(model, ForestModel):
        return {
            "format": "bctrace-model", "version": 1, "kind": "rf",
            "feature_names": model.feature_names,
            "params": {
                "n_trees": model.n_trees, "max_depth": model.max_depth,
                "min_samples_split": model.min_samples_split,
                "seed": model.seed, "bootstrap": model.bootstrap,
            },
            "trees": [_node_to_obj(t) for t in model.trees],
        }
    if isinstance(model, LinearModel):
        return {
            "format": "bctrace-model", "version": 1, "kind": "linear",
            "feature_names": model.feature_names,
            "intercept": model.intercept,
            "coefficients": model.coefficients.tolist(),
        }
    raise SchemaMismatch(f"cannot serialize a {type(model).__name__}")


def model_from_obj(obj):
    if obj.get("format") != "bctrace-model":
        raise SchemaMismatch("not a model document")
    kind = obj["kind"]
    if kind == "gbt":
        p = obj["params"]
        return GbtModel(
            base_score=float(obj["base_score"]),
            trees=[_node_from_obj(t) for t in obj["trees"]],
            learning_rate=float(obj["learning_rate"]),
            feature_names=list(obj["feature_names"]),
            params=GbtHyperParams(**p))
    if kind == "rf":
        p = obj["params"]
        return ForestModel(
            trees=[_node_from_obj(t) for t in obj["trees"]],
            feature_names=list(obj["feature_names"]),
            n_trees=int(p["n_trees"]), max_depth=p["max_depth"],
            min_samples_split=int(p["min_samples_split"]),
            seed=int(p["seed"]), bootstrap=bool(p["bootstrap"]))
    if kind == "linear":
        return LinearModel(intercept=float(obj["intercept"]),
                           coefficients=np.asarray(obj["coefficients"], float),
                           feature_names=list(obj["feature_names"]))
    raise SchemaMismatch(f"unknown model kind {kind!r}")


def model_to_json(model):
    return json.dumps(model_to_obj(model), sort_keys=True)


def model_from_json(text):
    return model_from_obj(json.loads(text))


# ---------------------------------------------------------------------------
# grid search

DEFAULT_GRIDS = {
    "gbt": {
        "n_estimators": [20, 50, 100, 200, 250],
        "learning_rate": [0.01, 0.05, 0.1, 0.2],
        "max_depth": [3, 5, 6, 7],
    },
    "gb": {
        "n_estimators": [20, 50, 100, 200, 250],
        "learning_rate": [0.01, 0.05, 0.1, 0.2],
        "max_depth": [3, 5, 6, 7],
    },
    "rf": {
        "min_samples_split": [2, 5],
        "n_estimators": [30, 50, 100, 200],
        "max_depth": [None, 5, 6, 7, 9, 10],
    },
}


def enumerate_grid(grid):
    """Cartesian product of the grid, in key and value order."""
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise GridEmpty("grid must name at least one parameter with values")
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*grid.values())]


@dataclass
class GridSearchResult:
    best_params: dict
    cv_table: list            # one row per config: params, fold rmses, mean
    model: object             # best config refit on the full table


def _make_folds(n, k, seed):
    if k < 2 or k > n:
        raise BadK(f"k={k} incompatible with {n} rows")
    order = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(order, k)]


def _fit_for(model_kind, X, y, params, names, seed):
    if model_kind in ("gbt", "gb"):
        lam = 1.0 if model_kind == "gbt" else 0.0
        hp = GbtHyperParams(lam=lam, **params)
        return fit_gbt(X, y, hp, feature_names=names, seed=seed)
    if model_kind == "rf":
        return fit_forest(X, y, n_trees=params.get("n_estimators", 100),
                          max_depth=params.get("max_depth"),
                          min_samples_split=params.get("min_samples_split", 2),
                          seed=seed, feature_names=names)
    if model_kind == "linear":
        return fit_linear(X, y, feature_names=names)
    raise BadParams(f"unknown model kind {model_kind!r}")


def grid_search(X, y, model_kind, grid, k=5, seed=0, feature_names=None) -> GridSearchResult:
    """Exhaustive cross-validated search over the parameter grid.

    Every config is scored by mean validation RMSE over the same seeded
    folds. Ties prefer fewer trees, then shallower depth, then grid order.
    Boosted configs that differ only in tree count share one staged fit
    per fold, which changes nothing about the scores.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    configs = enumerate_grid(grid)
    folds = _make_folds(len(y), k, seed)
    names = list(feature_names) if feature_names else [f"f{i}" for i in range(X.shape[1])]

    fold_rmses = {i: [] for i in range(len(configs))}
    staged = model_kind in ("gbt", "gb") and "n_estimators" in grid

    for val_idx in folds:
        mask = np.ones(len(y), dtype=bool)
        mask[val_idx] = False
        Xt, yt = X[mask], y[mask]
        Xv, yv = X[val_idx], y[val_idx]
        if staged:
            groups = {}
            for ci, cfg in enumerate(configs):
                key = tuple(sorted((k_, v) for k_, v in cfg.items() if k_ != "n_estimators"))
                groups.setdefault(key, []).append(ci)
            for members in groups.values():
                counts = sorted({configs[ci]["n_estimators"] for ci in members})
                proto = dict(configs[members[0]], n_estimators=max(counts))
                model = _fit_for(model_kind, Xt, yt, proto, names, seed)
                preds = model.staged_predict(Xv, counts)
                for ci in members:
                    m = configs[ci]["n_estimators"]
                    rmse = float(np.sqrt(np.mean((preds[m] - yv) ** 2)))
                    fold_rmses[ci].append(rmse)
        else:
            for ci, cfg in enumerate(configs):
                model = _fit_for(model_kind, Xt, yt, cfg, names, seed)
                rmse = float(np.sqrt(np.mean((model.predict(Xv) - yv) ** 2)))
                fold_rmses[ci].append(rmse)

    cv_table = []
    for ci, cfg in enumerate(configs):
        cv_table.append({
            "params": cfg,
            "fold_rmse": fold_rmses[ci],
            "mean_rmse": float(np.mean(fold_rmses[ci])),
        })

    def sort_key(ci):
        cfg = configs[ci]
        depth = cfg.get("max_depth")
        return (cv_table[ci]["mean_rmse"], cfg.get("n_estimators", 0),
                math.inf if depth is None else depth, ci)

    best_ci = min(range(len(configs)), key=sort_key)
    best = configs[best_ci]
    model = _fit_for(model_kind, X, y, best, names, seed)
    return GridSearchResult(best_params=best, cv_table=cv_table, model=model)
