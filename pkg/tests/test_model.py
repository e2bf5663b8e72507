"""Model assembly: connectors, projections, presets and parameter accounting."""

import numpy as np
import pytest

from factorfield import factors, model, tape, transforms
from factorfield.factors import FactorSpec
from factorfield.model import ModelConfig, ProjectionSpec
from factorfield.transforms import ContractionSpec, TransformSpec

RNG = np.random.default_rng(21)


def tiny_dif(channels=(2, 2), coef_res=4, basis_res=(4, 6), dims=2, projection=None):
    """Small two-factor coefficient-times-basis model for exact checks."""
    coef = FactorSpec(
        kind=factors.DENSE_GRID,
        transform=TransformSpec(transforms.IDENTITY),
        channels_per_level=(1,) * len(channels),
        grid_resolutions=(coef_res,),
    )
    basis = FactorSpec(
        kind=factors.DENSE_GRID,
        transform=TransformSpec(transforms.SAWTOOTH, tuple(2.0 * (i + 1) for i in range(len(channels)))),
        channels_per_level=channels,
        grid_resolutions=basis_res,
        shared=True,
    )
    return ModelConfig(
        dims=dims,
        factors=(coef, basis),
        projection=projection or ProjectionSpec(kind=model.LINEAR, output_dim=1),
    )


def set_dyadic(store, rng, scale_pow=3):
    """Overwrite every tensor with dyadic values so products/sums are exact."""
    for name in store.names():
        pt = store[name]
        vals = rng.integers(-8, 9, size=pt.shape).astype(np.float64) / (1 << scale_pow)
        pt.values[...] = vals


def dyadic_points(n, dims, rng):
    """Query points whose interpolation weights are dyadic."""
    return rng.integers(0, 65, size=(n, dims)).astype(np.float64) / 64.0


# ---------------------------------------------------------------------------
# reduction chain


def test_reduction_chain_matches_scalar_product_bitwise():
    # Unit coefficients and a unit-row linear projection reduce the full
    # pipeline to a plain scalar product with the basis features.
    config = tiny_dif()
    store = model.new_store(config, seed=0, dtype=np.float64)
    rng = np.random.default_rng(5)
    set_dyadic(store, rng)
    store["factor0.level0"].values[...] = 1.0  # unit coefficients
    store["proj.w0"].values[...] = 1.0  # unit projection row
    x = dyadic_points(32, 2, rng)
    got = model.forward(config, store, x).value[:, 0]

    # Oracle: interpolate the basis grids directly and sum the channels.
    basis = factors.eval_factor(config.factors[1], store, "factor1", x)
    want = np.concatenate([s.value for s in basis.slices], axis=-1).sum(axis=-1)
    np.testing.assert_array_equal(got, want)


def test_reduction_chain_identity_transform_is_plain_field_lookup():
    # With the basis transform replaced by identity the model is a single
    # interpolated field: s(x) = sum_k b_k(x).
    basis = FactorSpec(
        kind=factors.DENSE_GRID,
        transform=TransformSpec(transforms.IDENTITY),
        channels_per_level=(4,),
        grid_resolutions=(5,),
    )
    config = ModelConfig(
        dims=2,
        factors=(basis,),
        projection=ProjectionSpec(kind=model.LINEAR, output_dim=1),
    )
    store = model.new_store(config, seed=0, dtype=np.float64)
    rng = np.random.default_rng(6)
    set_dyadic(store, rng)
    store["proj.w0"].values[...] = 1.0
    x = dyadic_points(32, 2, rng)
    got = model.forward(config, store, x).value[:, 0]
    out = factors.eval_factor(basis, store, "factor0", x)
    want = out.features.value.sum(axis=-1)
    np.testing.assert_array_equal(got, want)


def test_hadamard_product_commutes_across_factor_order():
    # With dyadic parameter values the per-level product is exact, so factor
    # order cannot change a single bit of the output.
    coef = FactorSpec(
        kind=factors.DENSE_GRID,
        transform=TransformSpec(transforms.IDENTITY),
        channels_per_level=(1, 1),
        grid_resolutions=(4,),
    )
    basis_a = FactorSpec(
        kind=factors.DENSE_GRID,
        transform=TransformSpec(transforms.SAWTOOTH, (2.0, 4.0)),
        channels_per_level=(3, 3),
        grid_resolutions=(4, 8),
    )
    basis_b = FactorSpec(
        kind=factors.DENSE_GRID,
        transform=TransformSpec(transforms.TRIANGULAR, (2.0, 4.0)),
        channels_per_level=(3, 3),
        grid_resolutions=(6, 6),
    )
    proj = ProjectionSpec(kind=model.LINEAR, output_dim=2)
    rng = np.random.default_rng(9)
    x = dyadic_points(20, 2, rng)

    # Fixed dyadic values per factor, independent of its position.
    rng_vals = np.random.default_rng(33)
    values = {
        id(spec): [
            rng_vals.integers(-8, 9, size=shape).astype(np.float64) / 8.0
            for shape in factors.grid_param_shapes(spec, 2)
        ]
        for spec in (coef, basis_a, basis_b)
    }
    proj_vals = rng_vals.integers(-8, 9, size=(6, 2)).astype(np.float64) / 8.0

    def run(order):
        config = ModelConfig(dims=2, factors=order, projection=proj)
        store = model.new_store(config, seed=0, dtype=np.float64)
        for i, spec in enumerate(order):
            for level, vals in enumerate(values[id(spec)]):
                store[f"factor{i}.level{level}"].values[...] = vals
        store["proj.w0"].values[...] = proj_vals
        return model.forward(config, store, x).value

    out1 = run((coef, basis_a, basis_b))
    out2 = run((basis_b, basis_a, coef))
    np.testing.assert_array_equal(out1, out2)


# ---------------------------------------------------------------------------
# connectors and features


def test_product_connector_broadcasts_single_channel_levels():
    config = tiny_dif(channels=(3, 2))
    store = model.new_store(config, seed=0, dtype=np.float64)
    x = RNG.uniform(0, 1, size=(10, 2))
    feats = model.connected_features(config, store, x)
    assert feats.value.shape == (10, 5)
    coef = factors.eval_factor(config.factors[0], store, "factor0", x)
    basis = factors.eval_factor(config.factors[1], store, "factor1", x)
    want = np.concatenate(
        [coef.slices[l].value * basis.slices[l].value for l in range(2)], axis=-1
    )
    np.testing.assert_allclose(feats.value, want, rtol=1e-12)


def test_concat_connector_stacks_all_channels():
    config = tiny_dif(channels=(3, 2))
    config = ModelConfig(
        dims=2, factors=config.factors, connector=model.CONCAT, projection=config.projection
    )
    store = model.new_store(config, seed=0, dtype=np.float64)
    feats = model.connected_features(config, store, RNG.uniform(0, 1, size=(4, 2)))
    assert feats.value.shape == (4, 2 + 5)  # coef levels + basis levels
    assert model.feature_dim(config) == 7


def test_raw_factors_bypass_product_and_dropout():
    raw = FactorSpec(kind=factors.RAW_COORDS, transform=TransformSpec(transforms.IDENTITY))
    config = tiny_dif()
    config = ModelConfig(
        dims=2,
        factors=config.factors + (raw,),
        projection=config.projection,
        dropout_mu=0.9,
    )
    store = model.new_store(config, seed=0, dtype=np.float64)
    x = RNG.uniform(0, 1, size=(6, 2))
    rng = np.random.default_rng(0)
    feats = model.connected_features(config, store, x, training=True, rng=rng)
    # Raw coordinates are appended unmasked even under aggressive dropout.
    np.testing.assert_allclose(feats.value[:, -2:], x, rtol=1e-12)


def test_training_dropout_changes_features_and_needs_rng():
    config = tiny_dif()
    store = model.new_store(config, seed=0, dtype=np.float64)
    x = RNG.uniform(0, 1, size=(200, 2))
    clean = model.connected_features(config, store, x).value
    rng = np.random.default_rng(1)
    seen_drop = False
    for _ in range(20):
        noisy = model.connected_features(config, store, x, training=True, rng=rng).value
        zeroed = np.all(noisy == 0, axis=0)
        kept = ~zeroed
        np.testing.assert_allclose(noisy[:, kept], clean[:, kept], rtol=1e-12)
        seen_drop = seen_drop or zeroed.any()
    assert seen_drop
    with pytest.raises(ValueError):
        model.connected_features(config, store, x, training=True)


def test_validate_rejects_mismatched_product_levels():
    coef = FactorSpec(
        kind=factors.DENSE_GRID,
        transform=TransformSpec(transforms.IDENTITY),
        channels_per_level=(1, 1, 1),
        grid_resolutions=(4,),
    )
    basis = FactorSpec(
        kind=factors.DENSE_GRID,
        transform=TransformSpec(transforms.SAWTOOTH, (2.0, 4.0)),
        channels_per_level=(2, 2),
        grid_resolutions=(4, 4),
    )
    with pytest.raises(ValueError):
        ModelConfig(dims=2, factors=(coef, basis))
    basis_bad = FactorSpec(
        kind=factors.DENSE_GRID,
        transform=TransformSpec(transforms.SAWTOOTH, (2.0, 4.0, 6.0)),
        channels_per_level=(2, 3, 2),
        grid_resolutions=(4, 4, 4),
    )
    other = FactorSpec(
        kind=factors.DENSE_GRID,
        transform=TransformSpec(transforms.TRIANGULAR, (2.0, 4.0, 6.0)),
        channels_per_level=(2, 2, 2),
        grid_resolutions=(4, 4, 4),
    )
    with pytest.raises(ValueError):
        ModelConfig(dims=2, factors=(basis_bad, other))


# ---------------------------------------------------------------------------
# projections


def test_linear_projection_is_a_single_matrix():
    config = tiny_dif()
    store = model.new_store(config, seed=0, dtype=np.float64)
    assert "proj.b0" not in store
    x = RNG.uniform(0, 1, size=(8, 2))
    feats = model.connected_features(config, store, x)
    got = model.forward(config, store, x).value
    np.testing.assert_allclose(got, feats.value @ store["proj.w0"].values, rtol=1e-12)


def test_mlp_projection_matches_manual_forward():
    proj = ProjectionSpec(kind=model.MLP_PROJ, output_dim=3, layers=2, width=16)
    config = tiny_dif(projection=proj)
    store = model.new_store(config, seed=0, dtype=np.float64)
    x = RNG.uniform(0, 1, size=(8, 2))
    h = model.connected_features(config, store, x).value
    for i in range(3):
        h = h @ store[f"proj.w{i}"].values + store[f"proj.b{i}"].values
        if i < 2:
            h = np.maximum(h, 0.0)
    np.testing.assert_allclose(model.forward(config, store, x).value, h, rtol=1e-10)


def test_volume_projection_refuses_direct_forward_and_splits_head():
    proj = ProjectionSpec(kind=model.VOLUME, layers=2, width=16, view_pe_levels=2)
    coef = FactorSpec(
        kind=factors.DENSE_GRID,
        transform=TransformSpec(transforms.IDENTITY),
        channels_per_level=(2,),
        grid_resolutions=(4,),
    )
    config = ModelConfig(
        dims=3,
        factors=(coef,),
        projection=proj,
        contraction=ContractionSpec("bounded", (0.0,) * 3, (1.0,) * 3),
    )
    store = model.new_store(config, seed=0, dtype=np.float64)
    pts = RNG.uniform(0, 1, size=(5, 3))
    dirs = RNG.normal(size=(5, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    sigma, rgb = model.query_field(config, store, pts, dirs)
    assert sigma.value.shape == (5, 1)
    assert rgb.value.shape == (5, 3)
    assert np.all(sigma.value >= 0)  # softplus density
    assert np.all((rgb.value > 0) & (rgb.value < 1))  # sigmoid color
    with pytest.raises(ValueError):
        model.forward(config, store, pts)


def test_view_encoding_shape_and_frequencies():
    dirs = np.array([[1.0, 0.0, 0.0]])
    enc = model.view_encoding(dirs, 2)
    assert enc.shape == (1, 3 + 6 * 2)
    np.testing.assert_allclose(enc[0, :3], dirs[0], rtol=1e-12)
    np.testing.assert_allclose(enc[0, 3], np.sin(np.pi), atol=1e-12)


# ---------------------------------------------------------------------------
# parameter accounting


def test_param_count_matches_built_tensors_for_all_presets():
    for name in model.PRESET_NAMES:
        config = model.preset(name, dims=3, signal_extent=128.0, coef_resolution=8)
        store = model.new_store(config, seed=0)
        counts = model.param_count(config)
        assert counts["total"] == store.total_elements(), name
        by_group = {"projection": 0, "coefficients": 0, "basis": 0}
        for tname in store.names():
            by_group[model.param_group(config, tname)] += store[tname].values.size
        for key in by_group:
            assert counts[key] == by_group[key], (name, key)


def test_param_count_formula_hand_constructed():
    # |theta| = |theta_P| + sum (M_c)^D + sum K_l (M_b^l)^D for a 2D model
    # with coefficient resolution 10 and basis resolutions 4 and 6.
    config = tiny_dif(channels=(3, 2), coef_res=10, basis_res=(4, 6))
    counts = model.param_count(config)
    assert counts["coefficients"] == 10**2 * 2  # one channel per level
    assert counts["basis"] == 3 * 4**2 + 2 * 6**2
    assert counts["projection"] == 5 * 1
    assert counts["total"] == sum(v for k, v in counts.items() if k != "total")


def test_channel_layout_template_and_eta():
    assert model.channel_layout(6, 0) == (4, 4, 4, 2, 2, 2)
    assert model.channel_layout(6, 3) == (32, 32, 32, 16, 16, 16)
    assert model.channel_layout(3, 1) == (8, 8, 8)
    assert model.channel_layout(1, 0) == (18,)


def test_basis_resolutions_linear_ramp_and_extent_scaling():
    assert model.basis_resolutions(6, 1024.0) == (32, 51, 70, 90, 109, 128)
    assert model.basis_resolutions(6, 768.0) == (24, 38, 53, 67, 82, 96)
    assert model.basis_resolutions(6, 8.0) == (2,) * 6  # floor at 2
    assert model.basis_resolutions(1, 512.0) == (64,)


def test_preset_rejects_unknown_names():
    with pytest.raises(ValueError):
        model.preset("not_a_preset")


def test_preset_structures():
    ingp = model.preset("ingp", dims=3)
    assert ingp.factors[0].kind == factors.HASHED_VECTORS
    assert len(ingp.factors[0].channels_per_level) == 16
    assert ingp.factors[0].grid_resolutions[0] == 16
    assert ingp.factors[0].grid_resolutions[-1] == 512
    cp = model.preset("tensorf_cp", dims=3)
    assert len(cp.factors) == 3
    assert {f.axis_rotation for f in cp.factors} == {0, 1, 2}
    vm = model.preset("tensorf_vm", dims=3)
    kinds = {f.transform.kind for f in vm.factors}
    assert kinds == {transforms.ORTHO_1D, transforms.ORTHO_2D}
    occ = model.preset("occnet", dims=3)
    assert occ.factors[0].kind == factors.RAW_COORDS
    nerf = model.preset("nerf", dims=3)
    assert nerf.factors[0].transform.pairs
    dif = model.preset("dif_grid", dims=2)
    assert dif.factors[0].transform.kind == transforms.IDENTITY
    assert dif.factors[1].transform.kind == transforms.SAWTOOTH
    assert dif.factors[1].shared and not dif.factors[0].shared


def test_shared_param_names_cover_projection_and_flagged_factors():
    config = model.preset("dif_grid", dims=2, signal_extent=64.0, coef_resolution=8)
    store = model.new_store(config, seed=0)
    shared = model.shared_param_names(config, store)
    assert all(n.startswith(("proj.", "factor1.")) for n in shared)
    assert not any(n.startswith("factor0.") for n in shared)
    assert len(shared) == len([n for n in store.names() if not n.startswith("factor0.")])


def test_with_bbox_rescales_contraction():
    config = tiny_dif().with_bbox((0.0, 0.0), (256.0, 128.0))
    assert config.contraction.bbox_max == (256.0, 128.0)
    store = model.new_store(config, seed=0, dtype=np.float64)
    a = model.forward(config, store, np.array([[128.0, 64.0]])).value
    plain = tiny_dif()
    store2 = model.new_store(plain, seed=0, dtype=np.float64)
    b = model.forward(plain, store2, np.array([[0.5, 0.5]])).value
    np.testing.assert_allclose(a, b, rtol=1e-12)
