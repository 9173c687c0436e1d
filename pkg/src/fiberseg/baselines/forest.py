"""
Random Forest Voxel Classifier
Balanced voxel sampling, CART trees with Gini impurity, averaged leaf probabilities
and a line-oriented text persistence format
"""
import math
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.fiberseg.errors import DimensionMismatchError, ForestError
from src.fiberseg.filters import FeatureStack
from src.fiberseg.volgrid import LabelVolume
from src.utils.config import settings

_LEAF = -1
_NODE_FIELDS = "tree,node,kind,channel,threshold,left,right,p_fiber"


class ForestConfig(BaseModel):
    """Random forest hyperparameters"""

    model_config = ConfigDict(frozen=True)

    n_trees: int = Field(50, ge=1)
    max_depth: int = Field(12, ge=1)
    min_samples_leaf: int = Field(5, ge=1)
    features_per_split: Union[Literal["sqrt"], int] = "sqrt"
    samples_per_class: int = Field(20_000, ge=1)
    seed: int = Field(42, ge=0)

    @model_validator(mode="after")
    def _consistent(self) -> "ForestConfig":
        if self.samples_per_class < self.min_samples_leaf:
            raise ValueError("samples_per_class must be >= min_samples_leaf")
        if isinstance(self.features_per_split, int) and self.features_per_split < 1:
            raise ValueError("features_per_split must be >= 1")
        return self

    def split_features(self, n_channels: int) -> int:
        if self.features_per_split == "sqrt":
            return max(1, int(math.sqrt(n_channels)))
        return min(int(self.features_per_split), n_channels)


class DecisionTree:
    """
    Flat array representation of one CART tree

    Node i is a leaf when channel[i] == -1; otherwise samples with
    x[channel[i]] < threshold[i] go to left[i] and the rest to right[i].
    p_fiber[i] is the fiber share of the training samples reaching node i.
    """

    def __init__(self):
        self.channel: List[int] = []
        self.threshold: List[float] = []
        self.left: List[int] = []
        self.right: List[int] = []
        self.p_fiber: List[float] = []

    def add_node(self, p_fiber: float) -> int:
        self.channel.append(_LEAF)
        self.threshold.append(0.0)
        self.left.append(_LEAF)
        self.right.append(_LEAF)
        self.p_fiber.append(float(p_fiber))
        return len(self.channel) - 1

    @property
    def n_nodes(self) -> int:
        return len(self.channel)

    def finalize(self) -> "DecisionTree":
        self._channel = np.asarray(self.channel, dtype=np.int64)
        self._threshold = np.asarray(self.threshold, dtype=np.float64)
        self._left = np.asarray(self.left, dtype=np.int64)
        self._right = np.asarray(self.right, dtype=np.int64)
        self._p_fiber = np.asarray(self.p_fiber, dtype=np.float64)
        for i in range(self.n_nodes):
            if self.channel[i] != _LEAF and not (
                0 <= self.left[i] < self.n_nodes and 0 <= self.right[i] < self.n_nodes
            ):
                raise ForestError(f"node {i} references a missing child")
        return self

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        """P(fiber) per row of x"""
        node = np.zeros(x.shape[0], dtype=np.int64)
        rows = np.arange(x.shape[0])
        while True:
            channel = self._channel[node]
            internal = channel != _LEAF
            if not internal.any():
                break
            idx = rows[internal]
            n = node[idx]
            go_left = x[idx, self._channel[n]] < self._threshold[n]
            node[idx] = np.where(go_left, self._left[n], self._right[n])
        return self._p_fiber[node]


class TrainedForest:
    """Trees plus the channel manifest they were trained on"""

    def __init__(self, trees: List[DecisionTree], channels: List[str], config: ForestConfig):
        self.trees = trees
        self.channels = list(channels)
        self.config = config

    def check_channels(self, stack: FeatureStack) -> None:
        if stack.channels != self.channels:
            raise ForestError(
                f"feature channels do not match the forest manifest "
                f"({len(stack.channels)} vs {len(self.channels)} channels)"
            )


def _best_split(
    x: np.ndarray,
    y: np.ndarray,
    features: np.ndarray,
    min_leaf: int,
) -> Optional[Tuple[int, float]]:
    """Feature and midpoint threshold minimizing the weighted Gini impurity"""
    n = y.size
    n_left = np.arange(1, n)
    pos_total = int(y.sum())
    best: Optional[Tuple[float, int, float]] = None

    for f in features:
        order = np.argsort(x[:, f], kind="stable")
        xs = x[order, f]
        pos_left = np.cumsum(y[order])[:-1]

        valid = (xs[:-1] < xs[1:]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not valid.any():
            continue

        p_left = pos_left / n_left
        p_right = (pos_total - pos_left) / (n - n_left)
        impurity = 2.0 * (n_left * p_left * (1.0 - p_left) + (n - n_left) * p_right * (1.0 - p_right))
        impurity = np.where(valid, impurity, np.inf)

        i = int(np.argmin(impurity))
        if best is None or impurity[i] < best[0]:
            best = (float(impurity[i]), int(f), 0.5 * (xs[i] + xs[i + 1]))

    return None if best is None else (best[1], best[2])


def _grow_tree(x: np.ndarray, y: np.ndarray, cfg: ForestConfig, rng: np.random.Generator) -> DecisionTree:
    tree = DecisionTree()
    n_features = cfg.split_features(x.shape[1])
    root = tree.add_node(y.mean())
    stack = [(root, np.arange(y.size), 0)]

    while stack:
        node, idx, depth = stack.pop()
        labels = y[idx]
        positives = int(labels.sum())
        if depth >= cfg.max_depth or positives in (0, idx.size) or idx.size < 2 * cfg.min_samples_leaf:
            continue

        split = None
        order = rng.permutation(x.shape[1])
        for start in range(0, order.size, n_features):
            split = _best_split(x[idx], labels, order[start:start + n_features], cfg.min_samples_leaf)
            if split is not None:
                break
        if split is None:
            continue

        channel, threshold = split
        goes_left = x[idx, channel] < threshold
        left_idx, right_idx = idx[goes_left], idx[~goes_left]
        left = tree.add_node(y[left_idx].mean())
        right = tree.add_node(y[right_idx].mean())
        tree.channel[node] = channel
        tree.threshold[node] = threshold
        tree.left[node] = left
        tree.right[node] = right
        stack.append((right, right_idx, depth + 1))
        stack.append((left, left_idx, depth + 1))

    return tree.finalize()


def sample_training_voxels(
    stack: FeatureStack,
    labels: LabelVolume,
    samples_per_class: int,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """Class-balanced voxel sample; classes smaller than the quota are used whole"""
    flat = labels.data.ravel()
    picks = []
    for cls in (0, 1):
        members = np.flatnonzero(flat == cls)
        take = min(samples_per_class, members.size)
        picks.append(np.sort(rng.choice(members, size=take, replace=False)))
    index = np.concatenate(picks)
    x = stack.data.reshape(len(stack.channels), -1)[:, index].T.astype(np.float64)
    return x, flat[index].astype(np.int64)


def train_forest(stack: FeatureStack, labels: LabelVolume, cfg: ForestConfig) -> TrainedForest:
    """
    Train a random forest on a balanced voxel sample

    Every tree sees a bootstrap of the sample drawn from its own generator seeded with
    (cfg.seed, tree index), so trees are independent of training order.

    Raises:
        DimensionMismatchError: If stack and labels differ in dims
        ForestError: If either class is absent from the labels
    """
    if stack.dims != labels.dims:
        raise DimensionMismatchError(f"feature dims {stack.dims} vs label dims {labels.dims}")
    n_fiber = int(labels.data.sum())
    if n_fiber == 0 or n_fiber == labels.size:
        raise ForestError("training labels must contain both fiber and background voxels")

    x, y = sample_training_voxels(stack, labels, cfg.samples_per_class, np.random.default_rng(cfg.seed))
    logger.info(f"Training forest: {cfg.n_trees} trees on {y.size} voxels, {x.shape[1]} channels")

    trees = []
    for t in range(cfg.n_trees):
        rng = np.random.default_rng([cfg.seed, t + 1])
        boot = rng.integers(0, y.size, size=y.size)
        trees.append(_grow_tree(x[boot], y[boot], cfg, rng))
        logger.debug(f"Tree {t}: {trees[-1].n_nodes} nodes")

    return TrainedForest(trees, stack.channels, cfg)


def forest_proba(forest: TrainedForest, stack: FeatureStack, chunk: Optional[int] = None) -> np.ndarray:
    """Tree-averaged P(fiber) per voxel, shaped like the stack's volume"""
    forest.check_channels(stack)
    chunk = chunk or settings.PREDICT_CHUNK
    n_voxels = int(np.prod(stack.dims))
    out = np.empty(n_voxels, dtype=np.float64)

    for start in range(0, n_voxels, chunk):
        stop = min(start + chunk, n_voxels)
        x = stack.matrix(start, stop)
        per_tree = np.stack([tree.predict_proba(x) for tree in forest.trees])
        # sorted summation keeps the mean independent of tree order
        out[start:stop] = np.sort(per_tree, axis=0).sum(axis=0) / len(forest.trees)

    return out.reshape(stack.dims)


def forest_predict(forest: TrainedForest, stack: FeatureStack) -> LabelVolume:
    """Label voxels whose averaged P(fiber) exceeds 0.5 (an exact 0.5 tie is background)"""
    proba = forest_proba(forest, stack)
    return LabelVolume(data=proba > 0.5, voxel_size_um=stack.voxel_size_um)


def save_forest(forest: TrainedForest, path: Union[str, Path]) -> None:
    """
    Persist as text: a config header, a channel line, then one line per node
    ``tree,node,kind,channel,threshold,left,right,p_fiber``
    """
    cfg = forest.config
    lines = [
        f"FOREST n_trees={cfg.n_trees} max_depth={cfg.max_depth} "
        f"min_samples_leaf={cfg.min_samples_leaf} features_per_split={cfg.features_per_split} "
        f"samples_per_class={cfg.samples_per_class} seed={cfg.seed}",
        "channels=" + ";".join(forest.channels),
        _NODE_FIELDS,
    ]
    for t, tree in enumerate(forest.trees):
        for i in range(tree.n_nodes):
            kind = "leaf" if tree.channel[i] == _LEAF else "split"
            lines.append(
                f"{t},{i},{kind},{tree.channel[i]},{float(tree.threshold[i])!r},"
                f"{tree.left[i]},{tree.right[i]},{float(tree.p_fiber[i])!r}"
            )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Forest saved to {path}")


def load_forest(path: Union[str, Path]) -> TrainedForest:
    """Inverse of save_forest; thresholds and probabilities round-trip exactly"""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) < 3 or not lines[0].startswith("FOREST ") or not lines[1].startswith("channels="):
        raise ForestError(f"{path}: not a forest file")

    try:
        fields = dict(item.split("=", 1) for item in lines[0].split()[1:])
        spf = fields["features_per_split"]
        cfg = ForestConfig(
            n_trees=int(fields["n_trees"]),
            max_depth=int(fields["max_depth"]),
            min_samples_leaf=int(fields["min_samples_leaf"]),
            features_per_split=spf if spf == "sqrt" else int(spf),
            samples_per_class=int(fields["samples_per_class"]),
            seed=int(fields["seed"]),
        )
        channels = lines[1][len("channels="):].split(";")
        trees = [DecisionTree() for _ in range(cfg.n_trees)]
        for line in lines[3:]:
            if not line:
                continue
            t, i, kind, channel, threshold, left, right, p_fiber = line.split(",")
            tree = trees[int(t)]
            if int(i) != tree.n_nodes:
                raise ForestError(f"{path}: nodes of tree {t} out of order")
            tree.add_node(float(p_fiber))
            if kind == "split":
                tree.channel[-1] = int(channel)
                tree.threshold[-1] = float(threshold)
                tree.left[-1] = int(left)
                tree.right[-1] = int(right)
    except (KeyError, ValueError, IndexError) as e:
        if isinstance(e, ForestError):
            raise
        raise ForestError(f"{path}: malformed forest file ({e})") from e

    return TrainedForest([tree.finalize() for tree in trees], channels, cfg)
