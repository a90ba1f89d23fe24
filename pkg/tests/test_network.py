import math
from pathlib import Path

import numpy as np
import pytest

from dinseg import autodiff as ad
from dinseg.decomposition import decompose
from dinseg.errors import ShapeError
from dinseg.network import KTo1Spec, SegModuleSpec, build, composite_loss, forward_all, make_spec

from _oracles import cross_entropy_oracle
from conftest import tiny_model

GOLDEN = Path(__file__).parent / "data" / "golden_forward.npz"


def golden_case():
    """Fixed model and input behind the golden file (regenerate only on purpose)."""
    model = build(make_spec(2, "class", depth=2, base_channels=2), seed=42)
    image = np.random.default_rng(42).random((1, 1, 8, 8))
    return model, image


def zero_weights(model):
    for p in model.parameters():
        p.data[...] = 0.0
    return model


# --------------------------------------------------------------------------
# build


def test_k1_identity_is_two_stage_cascade():
    model = tiny_model("identity", n_classes=1, n_modules=1)
    assert model.spec.K == 1 and len(model.stage1) == 1
    assert model.spec.integrator.in_channels == 2 + 1


def test_class_k2_integrator_width():
    assert make_spec(2, "class").integrator.in_channels == 2 + 2 + 1
    assert make_spec(2, "class", feed_raw_to_integrator=False).integrator.in_channels == 4


def test_other_methods_widths():
    spec = make_spec(2, "shape")
    assert spec.K == 2 and all(s.out_channels == 3 for s in spec.stage1)
    assert make_spec(2, "identity", n_modules=3).K == 3


def test_same_seed_same_parameters():
    a, b = tiny_model(seed=3), tiny_model(seed=3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)
    c = tiny_model(seed=4)
    assert any((pa.data != pc.data).any() for pa, pc in zip(a.parameters(), c.parameters()))


def test_channel_mismatch_names_modules():
    s1 = SegModuleSpec(1, 2)
    with pytest.raises(ShapeError, match="integrator.*stage-1"):
        KTo1Spec(2, (s1, s1), SegModuleSpec(4, 3))


def test_spec_dict_roundtrip_and_hash():
    spec = make_spec(2, "shape", lam=0.3, kernel_size=5)
    again = KTo1Spec.from_dict(spec.to_dict())
    assert again == spec and again.hash() == spec.hash()
    assert make_spec(2, "class").hash() != spec.hash()


def test_default_lambda_is_one_over_k():
    assert make_spec(3, "class").weight == pytest.approx(1 / 3)
    assert make_spec(3, "class", lam=0.0).weight == 0.0


# --------------------------------------------------------------------------
# forward


def test_outputs_are_distributions(rng):
    model = tiny_model("shape", depth=2)
    s1, final = forward_all(model, rng.random((2, 8, 8)))
    assert [p.shape for p in s1] == [(2, 3, 8, 8)] * 2 and final.shape == (2, 3, 8, 8)
    for p in [*s1, final]:
        assert np.abs(p.sum(axis=1) - 1.0).max() < 1e-9


def test_zero_weights_give_uniform(rng):
    model = zero_weights(tiny_model())
    s1, final = forward_all(model, rng.random((8, 8)))
    for p in s1:
        np.testing.assert_allclose(p, 0.5, rtol=0, atol=1e-15)
    np.testing.assert_allclose(final, 1 / 3, rtol=0, atol=1e-15)


def test_indivisible_dims_suggest_padding(rng):
    model = tiny_model(depth=2)
    with pytest.raises(ShapeError, match=r"pad the image to \(12, 8\)"):
        forward_all(model, rng.random((10, 8)))


def test_forward_3d(rng):
    model = build(make_spec(2, "class", depth=1, base_channels=2, spatial_dims=3), 0)
    _, final = forward_all(model, rng.random((4, 4, 4)))
    assert final.shape == (1, 3, 4, 4, 4)


def test_forward_matches_golden_file():
    model, image = golden_case()
    s1, final = forward_all(model, image)
    ref = np.load(GOLDEN)
    np.testing.assert_array_equal(final, ref["final"])
    for k, p in enumerate(s1):
        np.testing.assert_array_equal(p, ref[f"stage1_{k}"])


# --------------------------------------------------------------------------
# composite loss


def _batch(rng, method="class", n=2, size=8):
    y = rng.integers(0, 3, size=(n, size, size))
    subs = [decompose(t, method, n_classes=2, n_modules=2) for t in y]
    return rng.random((n, size, size)), y, subs


def test_uniform_loss_arithmetic(rng):
    model = zero_weights(tiny_model())
    x, y, subs = _batch(rng)
    _, parts, _ = composite_loss(model, x, y, subs)
    assert abs(parts.total - (math.log(3) + math.log(2))) < 1e-9
    assert parts.sub == pytest.approx([math.log(2)] * 2, abs=1e-12)


def test_lambda_zero_is_main_term(rng):
    model = tiny_model()
    x, y, subs = _batch(rng)
    _, parts, _ = composite_loss(model, x, y, subs, lam=0.0)
    assert parts.total == parts.main


def test_lambda_scales_sub_block(rng):
    model = tiny_model()
    x, y, subs = _batch(rng)
    _, p1, _ = composite_loss(model, x, y, subs, lam=0.25)
    _, p2, _ = composite_loss(model, x, y, subs, lam=0.75)
    block = math.fsum(p1.sub)
    assert p1.total - p1.main == pytest.approx(0.25 * block, rel=1e-12)
    assert p2.total - p2.main == pytest.approx(3 * (p1.total - p1.main), rel=1e-12)


def test_loss_equals_term_by_term_recomputation(rng):
    model = tiny_model()
    x, y, subs = _batch(rng)
    _, parts, _ = composite_loss(model, x, y, subs)
    s1, final = model.forward(x[:, None])
    main = cross_entropy_oracle(final.data, y)
    sub = [cross_entropy_oracle(z.data, np.stack([r.sub_maps[k] for r in subs])) for k, z in enumerate(s1)]
    assert parts.main == pytest.approx(main, abs=1e-12)
    assert parts.sub == pytest.approx(sub, abs=1e-12)
    assert parts.total == pytest.approx(main + 0.5 * (sub[0] + sub[1]), abs=1e-12)


def test_k_mismatch_errors(rng):
    model = tiny_model()
    x, y, _ = _batch(rng)
    subs = [decompose(t, "identity", n_modules=3) for t in y]
    with pytest.raises(ValueError, match="K=2"):
        composite_loss(model, x, y, subs)


def test_identity_sub_losses_equal_for_identical_modules(rng):
    spec = make_spec(2, "identity", n_modules=2, depth=1, base_channels=2)
    model = build(spec, 0, stage1_seeds=[7, 7])
    x, y, subs = _batch(rng, "identity")
    _, parts, _ = composite_loss(model, x, y, subs)
    assert parts.sub[0] == parts.sub[1]


def test_composite_gradient_check(rng):
    model = tiny_model(depth=2)
    x, y, subs = _batch(rng)
    loss_fn = lambda: composite_loss(model, x, y, subs)[0]
    assert ad.grad_check(loss_fn, model.parameters(), n_samples=128) < 1e-4
