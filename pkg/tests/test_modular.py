import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathlm import tree as pt
from pathlm.model import LmConfig, init_params, param_shapes
from pathlm.modular import (
    ModularConfig,
    ModuleKey,
    ModuleStore,
    decode_path,
    encode_path,
    materialize_path,
    path_count,
    paths_through_module,
    split_levels,
)


def toy_modular(k, names=None, path_specific=()):
    names = names or [(f"p{l}",) for l in range(len(k))]
    return ModularConfig(
        level_counts=tuple(k),
        level_names=tuple(tuple(g) for g in names),
        path_specific=frozenset(path_specific),
    )


def test_path_counts():
    assert path_count(toy_modular([2, 4])) == 8
    assert path_count(toy_modular([16, 16])) == 256
    assert path_count(toy_modular([1])) == 1


def test_decode_first_and_last():
    cfg = toy_modular([2, 4])
    assert decode_path(0, cfg) == (1, 1)
    assert decode_path(7, cfg) == (2, 4)
    with pytest.raises(ValueError):
        decode_path(8, cfg)


@given(k=st.lists(st.integers(1, 5), min_size=1, max_size=4))
@settings(max_examples=50, deadline=None)
def test_roundtrip_all_paths(k):
    cfg = toy_modular(k)
    for j in range(path_count(cfg)):
        assert encode_path(decode_path(j, cfg), cfg) == j


def test_path_specific_level_rules():
    cfg = toy_modular([2, 2, 4], path_specific=(3,))
    assert path_count(cfg) == 4
    for j in range(4):
        assert decode_path(j, cfg)[2] == j + 1
    assert paths_through_module(cfg, ModuleKey(3, 2)) == [1]
    with pytest.raises(ValueError):
        toy_modular([2, 2, 3], path_specific=(3,))  # count must equal P


def test_paths_through_module_partition():
    cfg = toy_modular([2, 4])
    assert paths_through_module(cfg, ModuleKey(1, 1)) == [0, 1, 2, 3]
    for level, k in ((1, 2), (2, 4)):
        counted = sum(len(paths_through_module(cfg, ModuleKey(level, e))) for e in range(1, k + 1))
        assert counted == 8


def test_partition_validation():
    with pytest.raises(ValueError):
        ModularConfig(level_counts=(2,), level_names=(("a", "a"),))
    with pytest.raises(ValueError):
        ModularConfig(level_counts=(2, 2), level_names=(("a",), ("b",)), canonical_order=("a", "b", "c"))


def test_split_levels_partitions_all_names(tiny_cfg):
    mod = split_levels(tiny_cfg, [2, 2])
    all_names = sorted(n for g in mod.level_names for n in g)
    assert all_names == sorted(param_shapes(tiny_cfg))
    assert "tok_emb" in mod.level_names[0]
    assert "head.w" in mod.level_names[-1]


def test_noncontiguous_partition_is_fine(tiny_cfg):
    # all biases on level 1, everything else on level 2
    names = list(param_shapes(tiny_cfg))
    biases = tuple(n for n in names if n.endswith(("bias", "b", "b1", "b2")))
    rest = tuple(n for n in names if n not in biases)
    mod = ModularConfig(
        level_counts=(2, 3),
        level_names=(biases, rest),
        canonical_order=tuple(names),
    )
    assert path_count(mod) == 6
    store = ModuleStore.from_init(init_params(tiny_cfg), mod)
    full = store.materialize(0)
    assert list(full.keys()) == names


def test_materialize_single_module(tiny_cfg, tiny_params):
    mod = split_levels(tiny_cfg, [1, 1])
    store = ModuleStore.from_init(tiny_params, mod)
    assert pt.equal(store.materialize(0), tiny_params)


def test_materialize_sharing_structure(tiny_cfg, tiny_params):
    mod = split_levels(tiny_cfg, [2, 2])
    store = ModuleStore.from_init(tiny_params, mod)
    # perturb each module so materializations are distinguishable
    rng = np.random.default_rng(0)
    for key in store.cfg.module_keys():
        for arr in store.params[key].values():
            arr += rng.normal(0, 0.1, size=arr.shape)
    mats = [store.materialize(j) for j in range(4)]
    level1 = mod.names_of_level(1)
    level2 = mod.names_of_level(2)
    # paths 0 and 1 share the level-1 module, differ at level 2
    for n in level1:
        assert np.array_equal(mats[0][n], mats[1][n])
    assert any(not np.array_equal(mats[0][n], mats[1][n]) for n in level2)
    # paths 0 and 2 share level 2's first expert? no: decode 0 -> (1,1), 2 -> (2,1)
    for n in level2:
        assert np.array_equal(mats[0][n], mats[2][n])
    for n in level1:
        assert not np.array_equal(mats[0][n], mats[2][n])
    # four pairwise-distinct materializations
    for a in range(4):
        for b in range(a + 1, 4):
            assert not pt.equal(mats[a], mats[b])


def test_materialize_missing_module(tiny_cfg, tiny_params):
    mod = split_levels(tiny_cfg, [2, 2])
    store = ModuleStore.from_init(tiny_params, mod)
    del store.params[ModuleKey(2, 2)]
    with pytest.raises(KeyError):
        materialize_path(store, 1)


def test_module_key_str_roundtrip():
    key = ModuleKey(2, 13)
    assert ModuleKey.parse(str(key)) == key
