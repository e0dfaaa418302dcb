import numpy as np
import pytest

from ilnmn import autodiff as ad
from ilnmn import lang
from ilnmn.autodiff import Tape, Tensor
from ilnmn.engine import OP_INDEX, EEConfig, ExecutionEngine, assemble
from ilnmn.params import adam_step
from ilnmn.verify import gradcheck, gradcheck_params, random_tree

ARCHS = ("tensor_film", "tensor", "vector")
RED, BLUE = lang.color_token("red"), lang.color_token("blue")
LEFT = lang.transform_token("left_of")
T1 = lang.tokenize("and color[red] scene transform[left_of] color[blue] scene")


def make_ee(arch, C=4, seed=0, jitter=0.0, dtype=None):
    """Engine with all parameters optionally perturbed so zero-initialised
    branches are exercised too."""
    ee = ExecutionEngine(EEConfig(arch=arch, width=C, embed=C, film_hidden=C, cls_hidden=C),
                         np.random.default_rng(seed))
    if dtype is not None:
        ee.store.astype(dtype)
    if jitter:
        r = np.random.default_rng(seed + 1)
        for _, t in ee.store.items():
            t.data = t.data + jitter * r.standard_normal(t.shape).astype(t.data.dtype)
    return ee


def images(n, seed=0, dtype=np.float32):
    return np.random.default_rng(seed).standard_normal((n, 3, 30, 30)).astype(dtype)


def test_unknown_architecture():
    with pytest.raises(ValueError):
        EEConfig(arch="transformer")


@pytest.mark.parametrize("arch", ARCHS)
def test_output_shapes(arch):
    ee = make_ee(arch)
    assert ee.stem(Tensor(images(2))).shape == (2, 4, 15, 15)
    logits = ee.execute([T1, [lang.SCENE]], images(2))
    assert logits.shape == (2, 2)
    assert ee.predict([T1], images(1)).shape == (1,)
    with pytest.raises(ValueError):
        ee.execute([T1], images(2))


def test_assembly_levels():
    trees = [lang.parse_prefix(T1), lang.parse_prefix([lang.SCENE]), lang.parse_prefix([RED, lang.SCENE])]
    g = assemble(trees, lambda b: b)
    heights = [[(b, lang.surface(t)) for b, t, _, _ in lvl] for lvl in g.levels]
    assert heights[0] == [(0, "color[red]"), (0, "color[blue]"), (2, "color[red]")]
    assert heights[1] == [(0, "transform[left_of]")]
    assert heights[2] == [(0, "and")]
    assert g.roots[1] == 1 and g.scene_roots == [1]
    # bank rows: 3 leaves, then 3 + 1 + 1 module outputs
    assert g.roots[0] == 3 + 3 + 1
    _, tok, a, b = g.levels[2][0]
    assert (a, b) == (3, 3 + 3)  # and(color[red] out, transform out)


# ---------------------------------------------------------------------------
# gradient checks (float64, C=2)


def test_tensor_film_module_gradcheck():
    ee = make_ee("tensor_film", C=2, jitter=0.3, dtype=np.float64)
    r = np.random.default_rng(0)
    h1, h2, x = (r.standard_normal((3, 2, 5, 5)) for _ in range(3))
    ops = np.array([OP_INDEX[lang.AND], OP_INDEX[RED], OP_INDEX[LEFT]])
    err = gradcheck(lambda a, b, c: ee.forward_tensor_film(ops, a, b, c), [h1, h2, x], h=1e-6)
    assert err < 1e-3
    errs = gradcheck_params(lambda: ad.sum(ad.mul(ee.forward_tensor_film(ops, Tensor(h1), Tensor(h2), Tensor(x)),
                                                  Tensor(h1))),
                            ee.store, names=[n for n in ee.store if not n.startswith(("stem", "cls"))],
                            h=1e-6, max_entries=6)
    assert max(errs.values()) < 1e-3, errs


@pytest.mark.parametrize("token", [lang.AND, RED, LEFT])
def test_tensor_nmn_module_gradcheck(token):
    ee = make_ee("tensor", C=2, jitter=0.3, dtype=np.float64)
    r = np.random.default_rng(1)
    h1, h2 = r.standard_normal((2, 2, 5, 5)), r.standard_normal((2, 2, 5, 5))
    if lang.ARITY[token] == 2:
        err = gradcheck(lambda a, b: ee.forward_tensor_nmn(token, a, b), [h1, h2], h=1e-6)
    else:
        err = gradcheck(lambda a: ee.forward_tensor_nmn(token, a), [h1], h=1e-6)
    assert err < 1e-3
    name = f"mod.{lang.surface(token)}"
    errs = gradcheck_params(lambda: ad.sum(ad.mul(ee.forward_tensor_nmn(token, Tensor(h1), Tensor(h2)), Tensor(h2))),
                            ee.store, names=[n for n in ee.store if n.startswith(name)], h=1e-6, max_entries=6)
    assert max(errs.values()) < 1e-3, errs


def test_vector_module_gradcheck():
    ee = make_ee("vector", C=2, jitter=0.3, dtype=np.float64)
    r = np.random.default_rng(2)
    v1, v2, x = r.standard_normal((3, 2)), r.standard_normal((3, 2)), r.standard_normal((3, 2, 5, 5))
    ops = np.array([OP_INDEX[lang.AND], OP_INDEX[RED], OP_INDEX[LEFT]])
    err = gradcheck(lambda a, b, c: ee.forward_vector_nmn(ops, a, b, c), [v1, v2, x], h=1e-6)
    assert err < 1e-3
    errs = gradcheck_params(lambda: ad.sum(ad.mul(ee.forward_vector_nmn(ops, Tensor(v1), Tensor(v2), Tensor(x)),
                                                  Tensor(v1))),
                            ee.store, names=["embed", "film.v.l1.w", "film.v.l2.w", "film.v.l2.b", "va.w", "vb.w"],
                            h=1e-6, max_entries=6)
    assert max(errs.values()) < 1e-3, errs


@pytest.mark.parametrize("arch", ARCHS)
def test_end_to_end_execute_gradcheck(arch):
    ee = make_ee(arch, C=2, jitter=0.2, dtype=np.float64)
    imgs = images(2, dtype=np.float64)
    progs = [T1[:1] + [RED, lang.SCENE] + [LEFT, lang.SCENE], [BLUE, lang.SCENE]]
    labels = np.array([1, 0])
    errs = gradcheck_params(lambda: ad.cross_entropy(ee.execute(progs, Tensor(imgs)), labels), ee.store,
                            h=1e-6, max_entries=4)
    assert max(errs.values()) < 1e-2, errs
    assert gradcheck(lambda x: ee.execute(progs, x), [imgs], h=1e-6) < 1e-2


# ---------------------------------------------------------------------------
# module semantics


def test_tensor_film_binary_is_order_sensitive():
    ee = make_ee("tensor_film", jitter=0.3)
    r = np.random.default_rng(3)
    a, b, x = (Tensor(r.standard_normal((1, 4, 5, 5)).astype(np.float32)) for _ in range(3))
    op = np.array([OP_INDEX[lang.AND]])
    ab = ee.forward_tensor_film(op, a, b, x).data
    ba = ee.forward_tensor_film(op, b, a, x).data
    assert not np.allclose(ab, ba)


def test_tensor_film_identity_film_at_init():
    ee = make_ee("tensor_film")
    for site in ("h", "x", "g"):
        g, b = ee.film_params(site, np.arange(12))
        np.testing.assert_array_equal(g.data, 1.0)
        np.testing.assert_array_equal(b.data, 0.0)


def test_tensor_film_shares_weights_across_tokens():
    small = make_ee("tensor_film")
    names = set(small.store)
    assert not any("color" in n or "shape" in n or "transform" in n for n in names)
    # every token only owns one embedding row; gradient reaches just the rows used
    ee = make_ee("tensor_film", jitter=0.1)
    with Tape() as tape:
        tape.backward(ad.sum(ee.execute([T1], images(1))))
    used = {OP_INDEX[t] for t in T1 if t != lang.SCENE}
    rows = {i for i in range(12) if np.abs(ee.store["embed"].grad[i]).sum() > 0}
    assert rows == used
    assert np.abs(ee.store["w1.w"].grad).sum() > 0


def test_tensor_nmn_has_dedicated_modules():
    ee = make_ee("tensor")
    assert "mod.and.proj.w" in ee.store and "mod.color[red].proj.w" not in ee.store
    assert sum(n.endswith("conv1.w") for n in ee.store) == 11
    with pytest.raises(ValueError):
        ee.forward_tensor_nmn(lang.AND, Tensor(np.zeros((1, 4, 5, 5), np.float32)))


def test_tensor_nmn_residual_branch_starts_closed():
    ee = make_ee("tensor")
    x = Tensor(np.abs(np.random.default_rng(0).standard_normal((1, 4, 5, 5))).astype(np.float32))
    np.testing.assert_allclose(ee.forward_tensor_nmn(RED, x).data, x.data)


def test_vector_scene_program_reads_pooled_stem():
    ee = make_ee("vector", jitter=0.1)
    imgs = images(2)
    feat = ee.stem(Tensor(imgs))
    want = ee.classify(ad.global_max_pool(feat)).data
    np.testing.assert_allclose(ee.execute([[lang.SCENE]] * 2, imgs).data, want, rtol=1e-5)


def test_global_max_pool_is_permutation_invariant():
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
    perm = np.random.default_rng(1).permutation(16)
    xp = x.reshape(2, 3, 16)[:, :, perm].reshape(2, 3, 4, 4)
    np.testing.assert_array_equal(ad.global_max_pool(Tensor(x)).data, ad.global_max_pool(Tensor(xp)).data)


@pytest.mark.parametrize("arch", ARCHS)
def test_batched_execution_equals_one_by_one(arch):
    ee = make_ee(arch, jitter=0.1)
    rng = np.random.default_rng(4)
    progs = [lang.serialize(random_tree(rng, 4)) for _ in range(12)]
    imgs = images(12, seed=5)
    batch = ee.execute(progs, imgs).data
    single = np.concatenate([ee.execute([p], imgs[i:i + 1]).data for i, p in enumerate(progs)])
    np.testing.assert_allclose(batch, single, rtol=1e-4, atol=1e-5)


@pytest.mark.parametrize("arch", ARCHS)
def test_layout_sensitivity(arch):
    ee = make_ee(arch, jitter=0.2)
    rng = np.random.default_rng(6)
    img = images(1, seed=7)
    distinct = 0
    for _ in range(100):
        a = lang.serialize(random_tree(rng, 3))
        b = lang.serialize(random_tree(rng, 3))
        if a == b:
            continue
        la, lb = ee.execute([a, b], np.repeat(img, 2, axis=0)).data
        distinct += not np.allclose(la, lb)
    assert distinct >= 90


@pytest.mark.parametrize("arch", ARCHS)
def test_logits_finite_over_random_programs(arch):
    ee = make_ee(arch, C=4)
    rng = np.random.default_rng(8)
    for _ in range(10):
        progs = []
        while len(progs) < 100:
            p = lang.serialize(random_tree(rng, 6))
            if len(p) <= lang.MAX_PROGRAM_LEN:
                progs.append(p)
        logits = ee.execute(progs, images(100, seed=int(rng.integers(1 << 30)))).data
        assert np.isfinite(logits).all()
        assert np.abs(logits).max() < 1e3


@pytest.mark.parametrize("arch", ARCHS)
def test_deterministic(arch):
    a = make_ee(arch, seed=3).execute([T1], images(1)).data
    b = make_ee(arch, seed=3).execute([T1], images(1)).data
    np.testing.assert_array_equal(a, b)


def test_state_dict_round_trip():
    a, b = make_ee("tensor_film", seed=1), make_ee("tensor_film", seed=2)
    b.load_state_dict(a.state_dict())
    np.testing.assert_array_equal(a.execute([T1], images(1)).data, b.execute([T1], images(1)).data)
    c = a.clone()
    c.store["cls.fc2.b"].data += 1
    assert not np.array_equal(c.store["cls.fc2.b"].data, a.store["cls.fc2.b"].data)


@pytest.mark.parametrize("arch, steps", [("tensor_film", 100), ("tensor", 150)])
def test_capacity_fits_fifty_examples(dataset, arch, steps):
    idx = np.array([i for i in dataset.indices(0) if dataset.questions[dataset.qid[i]].template == 1][:50])
    imgs = dataset.standardized(idx)
    ans = dataset.answers[idx].astype(np.int64)
    trees = [lang.parse_prefix(dataset.program(i)) for i in idx]
    ee = ExecutionEngine(EEConfig(arch=arch, width=8), np.random.default_rng(0))
    acc = 0.0
    for step in range(steps):
        with Tape() as tape:
            tape.backward(ad.cross_entropy(ee.execute(trees, imgs), ans))
        adam_step(ee.store, 1e-3)
        if step % 25 == 24:
            acc = (ee.predict(trees, imgs) == ans).mean()
            if acc == 1.0:
                break
    assert acc >= 0.95
