"""Named parameter collections.

A ParamTree is an ordered ``dict[str, np.ndarray]`` of float64 arrays. The
insertion order of the dict is the canonical ordering; every function here
preserves it. Two trees are congruent when their names and shapes match
elementwise.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

ParamTree = dict[str, np.ndarray]


class TreeMismatchError(ValueError):
    """Raised when two trees that must be congruent are not."""


def congruent(a: ParamTree, b: ParamTree) -> bool:
    if list(a.keys()) != list(b.keys()):
        return False
    return all(a[k].shape == b[k].shape for k in a)


def check_congruent(a: ParamTree, b: ParamTree, what: str = "trees") -> None:
    if not congruent(a, b):
        raise TreeMismatchError(f"{what} are not congruent")


def zeros_like(tree: ParamTree) -> ParamTree:
    return {k: np.zeros_like(v) for k, v in tree.items()}


def copy(tree: ParamTree) -> ParamTree:
    return {k: v.copy() for k, v in tree.items()}


def map2(fn: Callable[[np.ndarray, np.ndarray], np.ndarray], a: ParamTree, b: ParamTree) -> ParamTree:
    check_congruent(a, b)
    return {k: fn(a[k], b[k]) for k in a}


def add(a: ParamTree, b: ParamTree) -> ParamTree:
    return map2(np.add, a, b)


def sub(a: ParamTree, b: ParamTree) -> ParamTree:
    return map2(np.subtract, a, b)


def scale(tree: ParamTree, c: float) -> ParamTree:
    return {k: v * c for k, v in tree.items()}


def add_scaled(acc: ParamTree, tree: ParamTree, c: float) -> None:
    """In-place acc[k] += c * tree[k]; acc must already be congruent."""
    check_congruent(acc, tree)
    for k in acc:
        acc[k] += c * tree[k]


def allfinite(tree: ParamTree) -> bool:
    return all(np.isfinite(v).all() for v in tree.values())


def equal(a: ParamTree, b: ParamTree) -> bool:
    """Bit-exact equality (names, shapes and every element)."""
    if list(a.keys()) != list(b.keys()):
        return False
    return all(np.array_equal(a[k], b[k]) for k in a)


def max_abs_diff(a: ParamTree, b: ParamTree) -> float:
    check_congruent(a, b)
    out = 0.0
    for k in a:
        if a[k].size:
            out = max(out, float(np.abs(a[k] - b[k]).max()))
    return out


def norm(tree: ParamTree) -> float:
    """Euclidean norm over the concatenation of all entries."""
    total = 0.0
    for v in tree.values():
        total += float(np.dot(v.ravel(), v.ravel()))
    return float(np.sqrt(total))


def n_params(tree: ParamTree) -> int:
    return sum(v.size for v in tree.values())


def subtree(tree: ParamTree, names: Iterable[str]) -> ParamTree:
    """Slice of a tree, in the order given by ``names``."""
    return {k: tree[k] for k in names}


def flatten(tree: ParamTree) -> np.ndarray:
    return np.concatenate([v.ravel() for v in tree.values()]) if tree else np.zeros(0)


def unflatten(flat: np.ndarray, like: ParamTree) -> ParamTree:
    out: ParamTree = {}
    i = 0
    for k, v in like.items():
        out[k] = flat[i : i + v.size].reshape(v.shape).copy()
        i += v.size
    if i != flat.size:
        raise TreeMismatchError("flat size does not match tree")
    return out
