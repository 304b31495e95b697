"""Random forests: bootstrap ensembles of CART trees with per-node feature subsets.

Classification trees split on Gini impurity and vote over integer class
labels; regression trees split on squared error and average.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from ._parallel import parallel_map

CLASSIFICATION = "classification"
REGRESSION = "regression"
TIE_TOL = 1e-12


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 10
    mtry: int | None = None  # None -> ceil(sqrt(d))
    max_depth: int | None = None
    min_samples_leaf: int = 1
    bootstrap: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")

    def resolved_mtry(self, d: int) -> int:
        m = math.ceil(math.sqrt(d)) if self.mtry is None else self.mtry
        if not 1 <= m <= d:
            raise ValueError(f"mtry={m} outside [1, {d}]")
        return m

    def to_dict(self) -> dict:
        return {"n_trees": self.n_trees, "mtry": self.mtry, "max_depth": self.max_depth,
                "min_samples_leaf": self.min_samples_leaf, "bootstrap": self.bootstrap,
                "rng_seed": self.rng_seed}


@dataclass(frozen=True, eq=False)
class Tree:
    """Flat pre-order tree. ``feature[k] == -1`` marks a leaf.

    ``value`` holds class counts (n_nodes x n_classes) for classification or
    leaf means (n_nodes,) for regression; split nodes keep zeros there.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of ``X``."""
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        active = self.feature[node] >= 0
        while active.any():
            a_rows, a_node = rows[active], node[active]
            go_left = X[a_rows, self.feature[a_node]] <= self.threshold[a_node]
            node[active] = np.where(go_left, self.left[a_node], self.right[a_node])
            active = self.feature[node] >= 0
        return node


class _Builder:
    def __init__(self, X, y, task, n_classes, mtry, max_depth, min_leaf, rng):
        self.X, self.y, self.task = X, y, task
        self.n_classes = n_classes
        self.mtry, self.max_depth, self.min_leaf = mtry, max_depth, min_leaf
        self.rng = rng
        self.d = X.shape[1]
        self.nodes = []
        if task == CLASSIFICATION:
            self.onehot = np.eye(n_classes)[y]

    def leaf_value(self, idx):
        if self.task == CLASSIFICATION:
            return np.bincount(self.y[idx], minlength=self.n_classes)
        return float(np.mean(self.y[idx]))

    def pure(self, idx) -> bool:
        yy = self.y[idx]
        return bool(np.all(yy == yy[0]))

    def build(self, idx, depth=0) -> int:
        me = len(self.nodes)
        self.nodes.append(None)
        split = None
        if (len(idx) >= 2 * self.min_leaf and not self.pure(idx)
                and (self.max_depth is None or depth < self.max_depth)):
            split = self.best_split(idx)
        if split is None:
            self.nodes[me] = (-1, 0.0, -1, -1, self.leaf_value(idx))
            return me
        f, thr = split
        go_left = self.X[idx, f] <= thr
        left = self.build(idx[go_left], depth + 1)
        right = self.build(idx[~go_left], depth + 1)
        self.nodes[me] = (f, thr, left, right, None)
        return me

    def _score(self, xs_sorted, order, idx):
        """Impurity after splitting below every sorted position (n-1 rows x m columns)."""
        n = len(idx)
        if self.task == CLASSIFICATION:
            oh = self.onehot[idx][order]                     # n x m x C
            cl = np.cumsum(oh, axis=0)[:-1]
            cr = oh.sum(axis=0) - cl
            nl = np.arange(1, n)[:, None].astype(np.float64)
            nr = n - nl
            return (nl - (cl * cl).sum(-1) / nl) + (nr - (cr * cr).sum(-1) / nr)
        yy = self.y[idx]
        yy = yy - yy.mean()
        ys = yy[order]                                      # n x m
        s1 = np.cumsum(ys, axis=0)[:-1]
        s2 = np.cumsum(ys * ys, axis=0)[:-1]
        t1, t2 = ys.sum(axis=0), (ys * ys).sum(axis=0)
        nl = np.arange(1, n)[:, None].astype(np.float64)
        nr = n - nl
        return (s2 - s1 * s1 / nl) + ((t2 - s2) - (t1 - s1) ** 2 / nr)

    def best_split(self, idx):
        perm = self.rng.permutation(self.d)
        feats = perm[:self.mtry]
        Xn = self.X[idx]
        # keep drawing features while all of the drawn ones are constant in this node
        extra = self.mtry
        while np.all(np.ptp(Xn[:, feats], axis=0) == 0):
            if extra >= self.d:
                return None
            feats = perm[extra:extra + 1]
            extra += 1
        feats = feats[np.ptp(Xn[:, feats], axis=0) > 0]
        cols = Xn[:, feats]
        order = np.argsort(cols, axis=0, kind="stable")
        xs = np.take_along_axis(cols, order, axis=0)
        score = self._score(xs, order, idx)
        n = len(idx)
        k = np.arange(1, n)[:, None]
        valid = (xs[1:] > xs[:-1]) & (k >= self.min_leaf) & (n - k >= self.min_leaf)
        if not valid.any():
            return None
        score = np.where(valid, score, np.inf)
        best = score.min()
        tol = TIE_TOL * max(1.0, abs(best))
        choices = []
        for c, f in enumerate(feats):
            hits = np.flatnonzero(score[:, c] <= best + tol)
            if len(hits):
                pos = hits[0]
                lo, hi = xs[pos, c], xs[pos + 1, c]
                thr = 0.5 * (lo + hi)
                if not lo <= thr < hi:
                    thr = lo
                choices.append((int(f), float(thr)))
        return min(choices)

    def tree(self) -> Tree:
        n = len(self.nodes)
        feature = np.array([nd[0] for nd in self.nodes], dtype=np.int64)
        threshold = np.array([nd[1] for nd in self.nodes], dtype=np.float64)
        left = np.array([nd[2] for nd in self.nodes], dtype=np.int64)
        right = np.array([nd[3] for nd in self.nodes], dtype=np.int64)
        if self.task == CLASSIFICATION:
            value = np.zeros((n, self.n_classes), dtype=np.int64)
        else:
            value = np.zeros(n)
        for k, nd in enumerate(self.nodes):
            if nd[0] < 0:
                value[k] = nd[4]
        return Tree(feature, threshold, left, right, value)


@dataclass(frozen=True, eq=False)
class RandomForest:
    trees: tuple[Tree, ...]
    task: str
    n_features: int
    params: ForestParams
    n_classes: int = 0
    inbag: tuple | None = None  # per-tree bootstrap counts; training-time only, not serialized

    def tree_predictions(self, X) -> np.ndarray:
        """(n_trees, n) array of per-tree class indices or regression values."""
        X = self._check(X)
        out = []
        for t in self.trees:
            leaf = t.apply(X)
            if self.task == CLASSIFICATION:
                out.append(np.argmax(t.value[leaf], axis=1))
            else:
                out.append(t.value[leaf])
        return np.array(out)

    def _check(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ValueError(f"forest expects {self.n_features} features, got {X.shape[1]}")
        return X

    def predict_index(self, X) -> np.ndarray:
        """Majority-vote class index per row; ties go to the lower class."""
        if self.task != CLASSIFICATION:
            raise ValueError("predict_index needs a classification forest")
        votes = self.tree_predictions(X)
        counts = np.zeros((votes.shape[1], self.n_classes), dtype=np.int64)
        for row in votes:
            counts[np.arange(len(row)), row] += 1
        return np.argmax(counts, axis=1)

    def predict_mean(self, X) -> np.ndarray:
        if self.task != REGRESSION:
            raise ValueError("predict_mean needs a regression forest")
        return self.tree_predictions(X).mean(axis=0)


def _seed_of(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([seed, *key]).generate_state(1, np.uint32)[0])


def train_forest(X, y, params: ForestParams, task: str = CLASSIFICATION,
                 n_classes: int | None = None) -> RandomForest:
    """Grow ``params.n_trees`` trees, each from its own seed stream.

    Classification targets are integer class indices ``0..n_classes-1``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) < 1:
        raise ValueError("X must be a non-empty (n, d) matrix")
    n, d = X.shape
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"y must have shape ({n},), got {y.shape}")
    if task == CLASSIFICATION:
        y = y.astype(np.int64)
        if np.any(y < 0):
            raise ValueError("class labels must be nonnegative integers")
        n_classes = int(y.max()) + 1 if n_classes is None else n_classes
        if np.any(y >= n_classes):
            raise ValueError("class label >= n_classes")
    elif task == REGRESSION:
        y = y.astype(np.float64)
        n_classes = 0
    else:
        raise ValueError(f"unknown task {task!r}")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    mtry = params.resolved_mtry(d)
    trees, inbag = [], []
    for t in range(params.n_trees):
        rng = np.random.default_rng(_seed_of(params.rng_seed, t))
        if params.bootstrap:
            idx = np.sort(rng.integers(0, n, size=n))
            inbag.append(np.bincount(idx, minlength=n))
        else:
            idx = np.arange(n)
            inbag.append(np.ones(n, dtype=np.int64))
        b = _Builder(X, y, task, n_classes, mtry, params.max_depth, params.min_samples_leaf, rng)
        b.build(idx)
        trees.append(b.tree())
    return RandomForest(tuple(trees), task, d, params, n_classes, tuple(inbag))


def oob_accuracy(forest: RandomForest, X, y) -> float:
    """Out-of-bag accuracy: each sample is judged only by trees that did not see it."""
    if forest.inbag is None:
        raise ValueError("forest carries no bootstrap record")
    votes = forest.tree_predictions(X)
    y = np.asarray(y)
    correct = total = 0
    for i in range(len(y)):
        mask = np.array([ib[i] == 0 for ib in forest.inbag])
        if not mask.any():
            continue
        counts = np.bincount(votes[mask, i], minlength=forest.n_classes)
        correct += int(np.argmax(counts) == y[i])
        total += 1
    if total == 0:
        raise ValueError("no out-of-bag samples")
    return correct / total


def predict_class(forest: RandomForest, x, levels=None):
    """Majority vote for one input. With ``levels`` the class index is mapped to its level value."""
    k = int(forest.predict_index(np.asarray(x)[None, :])[0])
    return k if levels is None else float(levels[k])


def predict_regression(forest: RandomForest, x) -> float:
    return float(forest.predict_mean(np.asarray(x)[None, :])[0])


@dataclass(frozen=True, eq=False)
class ForestGrid:
    """rows x cols classification forests, one per grid cell, stored row-major."""

    rows: int
    cols: int
    forests: tuple[RandomForest, ...]

    def __getitem__(self, ij) -> RandomForest:
        i, j = ij
        return self.forests[i * self.cols + j]

    def __len__(self):
        return len(self.forests)

    def predict_index(self, X) -> np.ndarray:
        """(n, rows, cols) class indices."""
        X = np.atleast_2d(X)
        out = np.array([f.predict_index(X) for f in self.forests])
        return out.T.reshape(len(X), self.rows, self.cols)


def train_percell_forests(latents, targets, params: ForestParams, n_classes: int = 6,
                          workers: int | None = None) -> ForestGrid:
    """One classifier per cell mapping codes to that cell's class index.

    ``targets`` is (n, rows, cols) integer classes; forest (i, j) draws its
    randomness from (seed, i, j).
    """
    latents = np.asarray(latents, dtype=np.float64)
    targets = np.asarray(targets)
    if targets.ndim != 3 or len(targets) != len(latents):
        raise ValueError("targets must be (n, rows, cols) with n matching latents")
    _, rows, cols = targets.shape
    jobs = [(i, j) for i in range(rows) for j in range(cols)]

    def fit(ij):
        i, j = ij
        p = replace(params, rng_seed=_seed_of(params.rng_seed, i, j))
        return train_forest(latents, targets[:, i, j], p, CLASSIFICATION, n_classes)

    return ForestGrid(rows, cols, tuple(parallel_map(fit, jobs, workers)))


def train_perlatent_forests(latents_in, latents_out, params: ForestParams,
                            workers: int | None = None) -> list[RandomForest]:
    """One regression forest per output code dimension."""
    A = np.asarray(latents_in, dtype=np.float64)
    B = np.asarray(latents_out, dtype=np.float64)
    if B.ndim == 1:
        B = B[:, None]
    if len(A) != len(B):
        raise ValueError("input and output code matrices need the same number of rows")

    def fit(q):
        p = replace(params, rng_seed=_seed_of(params.rng_seed, q))
        return train_forest(A, B[:, q], p, REGRESSION)

    return parallel_map(fit, range(B.shape[1]), workers)


# -- serialization --------------------------------------------------------------

FOREST_MAGIC = b"RFST"
GRID_MAGIC = b"RFGR"
FOREST_VERSION = 1
_HDR = struct.Struct("<4sHBIIIIiIBQ")


def _write_tree(buf: io.BytesIO, tree: Tree, task: str):
    buf.write(struct.pack("<I", tree.n_nodes))
    for k in range(tree.n_nodes):
        f = int(tree.feature[k])
        if f >= 0:
            buf.write(struct.pack("<BId", 0, f, float(tree.threshold[k])))
        elif task == CLASSIFICATION:
            buf.write(struct.pack("<B", 1))
            buf.write(np.asarray(tree.value[k], dtype="<u4").tobytes())
        else:
            buf.write(struct.pack("<Bd", 1, float(tree.value[k])))


def forest_to_bytes(forest: RandomForest) -> bytes:
    p = forest.params
    buf = io.BytesIO()
    buf.write(_HDR.pack(FOREST_MAGIC, FOREST_VERSION, int(forest.task == REGRESSION),
                        forest.n_features, forest.n_classes, len(forest.trees),
                        p.resolved_mtry(forest.n_features),
                        -1 if p.max_depth is None else p.max_depth,
                        p.min_samples_leaf, int(p.bootstrap), p.rng_seed))
    for t in forest.trees:
        _write_tree(buf, t, forest.task)
    return buf.getvalue()


def _read_tree(data: bytes, off: int, task: str, n_classes: int):
    (n_nodes,) = struct.unpack_from("<I", data, off)
    off += 4
    nodes = []
    for _ in range(n_nodes):
        (tag,) = struct.unpack_from("<B", data, off)
        off += 1
        if tag == 0:
            f, thr = struct.unpack_from("<Id", data, off)
            off += 12
            nodes.append((f, thr, None))
        elif task == CLASSIFICATION:
            counts = np.frombuffer(data, dtype="<u4", count=n_classes, offset=off).astype(np.int64)
            off += 4 * n_classes
            nodes.append((-1, 0.0, counts))
        else:
            (v,) = struct.unpack_from("<d", data, off)
            off += 8
            nodes.append((-1, 0.0, v))
    # rebuild child links from the pre-order layout
    left = np.full(n_nodes, -1, dtype=np.int64)
    right = np.full(n_nodes, -1, dtype=np.int64)

    pending = []  # split nodes still waiting for their right child
    for k in range(n_nodes):
        if k > 0:
            if nodes[k - 1][0] >= 0:
                left[k - 1] = k
            elif pending:
                right[pending.pop()] = k
            else:
                raise ValueError("corrupt tree encoding")
        if nodes[k][0] >= 0:
            pending.append(k)
    if pending or n_nodes == 0:
        raise ValueError("corrupt tree encoding")
    feature = np.array([nd[0] for nd in nodes], dtype=np.int64)
    threshold = np.array([nd[1] for nd in nodes], dtype=np.float64)
    if task == CLASSIFICATION:
        value = np.zeros((n_nodes, n_classes), dtype=np.int64)
    else:
        value = np.zeros(n_nodes)
    for k, nd in enumerate(nodes):
        if nd[0] < 0:
            value[k] = nd[2]
    return Tree(feature, threshold, left, right, value), off


def forest_from_bytes(data: bytes, off: int = 0) -> tuple[RandomForest, int]:
    (magic, version, is_reg, d, n_classes, n_trees, mtry, max_depth,
     min_leaf, bootstrap, seed) = _HDR.unpack_from(data, off)
    if magic != FOREST_MAGIC or version != FOREST_VERSION:
        raise ValueError(f"not a forest record at offset {off}")
    off += _HDR.size
    task = REGRESSION if is_reg else CLASSIFICATION
    trees = []
    for _ in range(n_trees):
        t, off = _read_tree(data, off, task, n_classes)
        trees.append(t)
    params = ForestParams(n_trees, mtry, None if max_depth < 0 else max_depth, min_leaf,
                          bool(bootstrap), seed)
    return RandomForest(tuple(trees), task, d, params, n_classes), off


def forests_to_bytes(forests) -> bytes:
    """Length-prefixed list of forests."""
    parts = [struct.pack("<4sHI", b"RFLS", FOREST_VERSION, len(forests))]
    parts.extend(forest_to_bytes(f) for f in forests)
    return b"".join(parts)


def forests_from_bytes(data: bytes) -> list[RandomForest]:
    magic, version, n = struct.unpack_from("<4sHI", data, 0)
    if magic != b"RFLS":
        raise ValueError("not a forest list file")
    off = struct.calcsize("<4sHI")
    out = []
    for _ in range(n):
        f, off = forest_from_bytes(data, off)
        out.append(f)
    return out


def grid_to_bytes(fg: ForestGrid) -> bytes:
    parts = [struct.pack("<4sHII", GRID_MAGIC, FOREST_VERSION, fg.rows, fg.cols)]
    parts.extend(forest_to_bytes(f) for f in fg.forests)
    return b"".join(parts)


def grid_from_bytes(data: bytes) -> ForestGrid:
    magic, version, rows, cols = struct.unpack_from("<4sHII", data, 0)
    if magic != GRID_MAGIC or version != FOREST_VERSION:
        raise ValueError("not a forest-grid file")
    off = struct.calcsize("<4sHII")
    forests = []
    for _ in range(rows * cols):
        f, off = forest_from_bytes(data, off)
        forests.append(f)
    if off != len(data):
        raise ValueError(f"trailing bytes in forest-grid file at offset {off}")
    return ForestGrid(rows, cols, tuple(forests))
