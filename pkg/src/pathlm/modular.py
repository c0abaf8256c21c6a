"""Levels, modules, paths and parameter partitioning.

A modular config partitions the base model's parameter names into L levels;
level l offers K_l interchangeable modules. A path picks one module per
level; materializing a path yields a full parameter tree. Path ids collapse
the per-level choices into a single mixed-radix integer, with level 1 as the
most significant digit. Levels may be flagged path-specific, in which case
they hold one module per path and do not enter the path count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tree as pt
from .model import LmConfig, param_shapes
from .optim import NesterovState
from .tree import ParamTree


@dataclass(frozen=True, order=True)
class ModuleKey:
    level: int  # 1-based
    expert: int  # 1-based

    def __str__(self) -> str:
        return f"L{self.level}E{self.expert}"

    @classmethod
    def parse(cls, s: str) -> "ModuleKey":
        level, expert = s[1:].split("E")
        return cls(int(level), int(expert))


@dataclass(frozen=True)
class ModularConfig:
    level_counts: tuple[int, ...]  # K_l per level
    level_names: tuple[tuple[str, ...], ...]  # parameter names per level
    path_specific: frozenset[int] = frozenset()  # 1-based level indices
    canonical_order: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if len(self.level_counts) != len(self.level_names):
            raise ValueError("one name group per level required")
        if any(k < 1 for k in self.level_counts):
            raise ValueError("every level needs at least one module")
        seen: set[str] = set()
        for names in self.level_names:
            for n in names:
                if n in seen:
                    raise ValueError(f"parameter {n!r} assigned to two levels")
                seen.add(n)
        order = self.canonical_order or tuple(n for names in self.level_names for n in names)
        if set(order) != seen:
            raise ValueError("levels do not partition the canonical name set")
        object.__setattr__(self, "canonical_order", order)
        for l in self.path_specific:
            if not 1 <= l <= self.n_levels:
                raise ValueError(f"path-specific level {l} out of range")
        p = self.n_paths
        for l in self.path_specific:
            if self.level_counts[l - 1] != p:
                raise ValueError(
                    f"path-specific level {l} must have {p} modules, has {self.level_counts[l - 1]}"
                )

    @property
    def n_levels(self) -> int:
        return len(self.level_counts)

    @property
    def n_paths(self) -> int:
        p = 1
        for l, k in enumerate(self.level_counts, start=1):
            if l not in self.path_specific:
                p *= k
        return p

    def module_keys(self) -> list[ModuleKey]:
        return [
            ModuleKey(l, e)
            for l, k in enumerate(self.level_counts, start=1)
            for e in range(1, k + 1)
        ]

    def names_of_level(self, level: int) -> tuple[str, ...]:
        return self.level_names[level - 1]


def path_count(cfg: ModularConfig) -> int:
    return cfg.n_paths


def decode_path(j: int, cfg: ModularConfig) -> tuple[int, ...]:
    """Path id -> 1-based expert choice per level (level 1 most significant)."""
    if not 0 <= j < cfg.n_paths:
        raise ValueError(f"path id {j} out of range [0, {cfg.n_paths})")
    shared = [l for l in range(cfg.n_levels, 0, -1) if l not in cfg.path_specific]
    digits = {}
    rest = j
    for l in shared:  # least significant level last, so peel from the right
        k = cfg.level_counts[l - 1]
        digits[l] = rest % k + 1
        rest //= k
    return tuple(
        (j + 1) if (l in cfg.path_specific) else digits[l] for l in range(1, cfg.n_levels + 1)
    )


def encode_path(choices: tuple[int, ...], cfg: ModularConfig) -> int:
    """Inverse of decode_path; validates path-specific digits."""
    if len(choices) != cfg.n_levels:
        raise ValueError("one choice per level required")
    j = 0
    for l in range(1, cfg.n_levels + 1):
        if l in cfg.path_specific:
            continue
        k = cfg.level_counts[l - 1]
        c = choices[l - 1]
        if not 1 <= c <= k:
            raise ValueError(f"choice {c} out of range at level {l}")
        j = j * k + (c - 1)
    for l in cfg.path_specific:
        if choices[l - 1] != j + 1:
            raise ValueError(f"path-specific level {l} expects module {j + 1}")
    return j


def path_modules(j: int, cfg: ModularConfig) -> list[ModuleKey]:
    return [ModuleKey(l, e) for l, e in enumerate(decode_path(j, cfg), start=1)]


def paths_through_module(cfg: ModularConfig, key: ModuleKey) -> list[int]:
    """All path ids whose route uses the given module."""
    if not 1 <= key.level <= cfg.n_levels:
        raise ValueError(f"level {key.level} out of range")
    if not 1 <= key.expert <= cfg.level_counts[key.level - 1]:
        raise ValueError(f"expert {key.expert} out of range at level {key.level}")
    return [
        j for j in range(cfg.n_paths) if decode_path(j, cfg)[key.level - 1] == key.expert
    ]


def split_levels(
    lm_cfg: LmConfig,
    level_counts: list[int],
    path_specific: tuple[int, ...] = (),
    embed_level: int = 1,
) -> ModularConfig:
    """Default partition: transformer blocks spread contiguously over levels,
    embeddings attached to `embed_level`, final norm and head to the last."""
    n_levels = len(level_counts)
    if lm_cfg.n_blocks < n_levels:
        raise ValueError("need at least one block per level")
    shapes = list(param_shapes(lm_cfg))
    groups: list[list[str]] = [[] for _ in range(n_levels)]
    bounds = np.linspace(0, lm_cfg.n_blocks, n_levels + 1).astype(int)
    for i in range(lm_cfg.n_blocks):
        level = int(np.searchsorted(bounds[1:], i, side="right"))
        groups[level].extend(n for n in shapes if n.startswith(f"block{i}."))
    groups[embed_level - 1].extend(["tok_emb", "pos_emb"])
    groups[-1].extend(["final_ln.gain", "final_ln.bias", "head.w", "head.b"])
    return ModularConfig(
        level_counts=tuple(level_counts),
        level_names=tuple(tuple(g) for g in groups),
        path_specific=frozenset(path_specific),
        canonical_order=tuple(shapes),
    )


class ModuleStore:
    """Global module parameters plus their per-module outer-optimizer state.

    The store is the only place where every module coexists; everything else
    sees single materialized paths or per-module slices.
    """

    def __init__(self, cfg: ModularConfig, outer_lr: float = 0.7, outer_momentum: float = 0.9):
        self.cfg = cfg
        self.params: dict[ModuleKey, ParamTree] = {}
        self.opt: dict[ModuleKey, NesterovState] = {}
        self._outer = (outer_lr, outer_momentum)

    @classmethod
    def from_init(
        cls,
        init: ParamTree,
        cfg: ModularConfig,
        outer_lr: float = 0.7,
        outer_momentum: float = 0.9,
    ) -> "ModuleStore":
        store = cls(cfg, outer_lr, outer_momentum)
        for key in cfg.module_keys():
            slice_tree = pt.copy(pt.subtree(init, cfg.names_of_level(key.level)))
            store.params[key] = slice_tree
            store.opt[key] = NesterovState.init(slice_tree, outer_lr, outer_momentum)
        return store

    def materialize(self, j: int) -> ParamTree:
        """Full parameter tree for path j, in canonical order."""
        merged: ParamTree = {}
        for key in path_modules(j, self.cfg):
            if key not in self.params:
                raise KeyError(f"module {key} missing from store")
            for name, arr in self.params[key].items():
                merged[name] = arr
        return {name: merged[name].copy() for name in self.cfg.canonical_order}

    def slice_for(self, key: ModuleKey, full: ParamTree) -> ParamTree:
        return pt.copy(pt.subtree(full, self.cfg.names_of_level(key.level)))

    def update(self, key: ModuleKey, params: ParamTree, opt: NesterovState) -> None:
        if key not in self.params:
            raise KeyError(f"module {key} missing from store")
        pt.check_congruent(self.params[key], params, f"module {key}")
        self.params[key] = params
        self.opt[key] = opt

    def clone(self) -> "ModuleStore":
        out = ModuleStore(self.cfg, *self._outer)
        for key in self.params:
            out.params[key] = pt.copy(self.params[key])
            st = self.opt[key]
            out.opt[key] = NesterovState(pt.copy(st.velocity), st.outer_lr, st.outer_momentum)
        return out


def materialize_path(store: ModuleStore, j: int) -> ParamTree:
    return store.materialize(j)
