import numpy as np
import pytest

from mvc import autodiff as ad
from mvc import data
from mvc.autodiff import Tape, Tensor
from mvc.backbone import (PREFIX, BackboneConfig, extract_local_representations, import_pretrained,
                          init_parameters, parameter_shapes)
from mvc.errors import ShapeError
from mvc.gradcheck import relative_error
from mvc.patching import patchify

TINY = BackboneConfig(image_size=8, patch_size=4, embed_dim=8, depth=2, num_heads=2, mlp_ratio=2.0)


def patches_for(cfg, rng, batch=2):
    return patchify(rng.random((batch, cfg.image_size, cfg.image_size)), cfg.patch_size)


def test_defaults():
    cfg = BackboneConfig()
    assert (cfg.embed_dim, cfg.num_patches, cfg.patch_dim) == (384, 196, 256)
    with pytest.raises(ValueError):
        BackboneConfig(embed_dim=10, num_heads=3)
    with pytest.raises(ShapeError):
        BackboneConfig(image_size=224, patch_size=15)


def test_init_is_seed_deterministic():
    a, b, c = (init_parameters(TINY, s) for s in (5, 5, 6))
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a if not k.endswith(("bias", "weight"))
               or "norm" not in k)


def test_init_statistics():
    cfg = BackboneConfig(embed_dim=64, num_heads=4, depth=1)
    w = init_parameters(cfg, 0, dtype=np.float64)[PREFIX + "patch_embed.weight"].data
    assert w.size >= 10_000
    assert abs(w.mean()) < 0.02 * 0.2
    assert 0.8 * 0.02 < w.std() < 1.2 * 0.02


def test_parameters_finite_and_shaped():
    params = init_parameters(TINY, 0)
    for name, shape in parameter_shapes(TINY).items():
        assert params[name].shape == shape
        assert np.all(np.isfinite(params[name].data))


@pytest.mark.parametrize("batch", [None, 1, 3])
def test_output_shape(batch, rng):
    params = init_parameters(TINY, 0)
    x = patches_for(TINY, rng, batch or 1)
    if batch is None:
        x = x[0]
    z = extract_local_representations(params, x, TINY)
    expected = (TINY.num_patches, TINY.embed_dim)
    assert z.shape == (expected if batch is None else (batch,) + expected)


def test_patch_count_mismatch(rng):
    params = init_parameters(TINY, 0)
    with pytest.raises(ShapeError, match="expected 4 patches"):
        extract_local_representations(params, rng.random((1, 5, 16)), TINY)


def test_forward_is_deterministic(rng):
    params = init_parameters(TINY, 0)
    x = patches_for(TINY, rng)
    a = extract_local_representations(params, x, TINY).data
    b = extract_local_representations(params, x, TINY).data
    assert np.array_equal(a, b)


def test_depth_zero_is_normed_embedding(rng):
    cfg = BackboneConfig(image_size=8, patch_size=4, embed_dim=8, depth=0, num_heads=2)
    params = init_parameters(cfg, 1, dtype=np.float64)
    params[PREFIX + "norm.weight"].data = rng.normal(size=8)
    params[PREFIX + "norm.bias"].data = rng.normal(size=8)
    x = patches_for(cfg, rng, 1)[0]
    p = {k[len(PREFIX):]: v.data for k, v in params.items()}
    e = x @ p["patch_embed.weight"] + p["patch_embed.bias"] + p["pos_embed"]
    mu = e.mean(-1, keepdims=True)
    var = ((e - mu) ** 2).mean(-1, keepdims=True)
    expected = (e - mu) / np.sqrt(var + 1e-6) * p["norm.weight"] + p["norm.bias"]
    np.testing.assert_allclose(extract_local_representations(params, x, cfg).data, expected, atol=1e-12)


def test_permutation_equivariance_without_positions(rng):
    params = init_parameters(TINY, 2, dtype=np.float64)
    params[PREFIX + "pos_embed"].data[:] = 0
    x = patches_for(TINY, rng, 1)[0]
    perm = np.array([2, 0, 3, 1])
    z = extract_local_representations(params, x, TINY).data
    zp = extract_local_representations(params, x[perm], TINY).data
    np.testing.assert_allclose(zp, z[perm], atol=1e-12)


def test_attention_rows_are_distributions(rng):
    params = init_parameters(TINY, 0)
    probe = []
    extract_local_representations(params, patches_for(TINY, rng), TINY, probe=probe)
    assert len(probe) == TINY.depth
    for attn in probe:
        assert np.all(np.abs(attn.sum(-1) - 1) < 1e-6)


def test_backbone_gradients_match_finite_differences(rng):
    params = init_parameters(TINY, 0, dtype=np.float64)
    for t in params.values():
        t.data = t.data + rng.normal(0, 0.3, size=t.shape)
    x = patches_for(TINY, rng)
    w = Tensor(rng.normal(size=(2, TINY.num_patches, TINY.embed_dim)))

    def f():
        return ad.sum(ad.mul(ad.gelu(extract_local_representations(params, x, TINY)), w))

    with Tape() as tape:
        loss = f()
    ad.backward(tape, loss)
    for name, t in params.items():
        numeric = ad.finite_difference_gradient(lambda _: f(), t)
        assert relative_error(t.grad, numeric) < 1e-3, name


def test_import_export_round_trip(tmp_path):
    source = {k: v.data for k, v in init_parameters(TINY, 9).items()}
    data.write_checkpoint(tmp_path / "a.ckpt", source, {})
    tensors, _ = data.read_checkpoint(tmp_path / "a.ckpt")
    imported = import_pretrained(init_parameters(TINY, 0), tensors, TINY)
    data.write_checkpoint(tmp_path / "b.ckpt", {k: v.data for k, v in imported.items()}, {})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_import_skips_heads_and_adapts_layouts(rng):
    source = {k: v.data.copy() for k, v in init_parameters(TINY, 9).items()}
    pos = source[PREFIX + "pos_embed"]
    source[PREFIX + "pos_embed"] = np.vstack([np.full((1, 8), 7.0, dtype=np.float32), pos])
    proj = source[PREFIX + "patch_embed.weight"]
    source[PREFIX + "patch_embed.weight"] = np.vstack([proj, proj * 0, proj * 0])
    source["head.weight"] = np.zeros((8, 1000), dtype=np.float32)
    out = import_pretrained(init_parameters(TINY, 0), source, TINY)
    np.testing.assert_array_equal(out[PREFIX + "pos_embed"].data, pos)
    np.testing.assert_array_equal(out[PREFIX + "patch_embed.weight"].data, proj)
    assert "head.weight" not in out


def test_import_rejects_wrong_width():
    wide = BackboneConfig(image_size=8, patch_size=4, embed_dim=12, depth=2, num_heads=2, mlp_ratio=2.0)
    source = {k: v.data for k, v in init_parameters(wide, 0).items()}
    with pytest.raises(ShapeError, match="patch_embed.weight"):
        import_pretrained(init_parameters(TINY, 0), source, TINY)


def test_import_reports_missing_tensors():
    with pytest.raises(KeyError, match="norm.weight"):
        import_pretrained(init_parameters(TINY, 0), {}, TINY)
