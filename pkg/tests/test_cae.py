import numpy as np
import pytest

from msfusion import cae, dsp, nn

SMALL = dict(channels_per_stage=[8, 16, 16], post_concat_channels=16, bottleneck_dim=16)
SPECS = [dsp.WIDEBAND, dsp.NARROWBAND, dsp.WAVELET]


def _images(n, specs, seed, n_speakers=None, monotone=False):
    """Smooth random images in [0, 1]: a few sinusoidal ridges across time."""
    rng = np.random.default_rng(seed)
    rows = np.arange(128)[:, None] / 128.0
    cols = np.arange(126)[None, :] / 126.0
    out = {}
    for spec in specs:
        stack = np.empty((n, 128, 126))
        for i in range(n):
            f = rng.uniform(2, 6)
            phase = rng.uniform(0, 2 * np.pi)
            img = 0.5 + 0.4 * np.sin(2 * np.pi * f * rows + phase + 3 * cols * rng.uniform(-1, 1))
            stack[i] = img if not monotone else np.broadcast_to(img.mean(axis=0, keepdims=True), img.shape)
        out[spec.name] = stack
    n_speakers = n_speakers or n
    return cae.ImageSet(out, [f"s{i % n_speakers}" for i in range(n)])


def _conv_sizes(h, w, k=3, s=2, p=1):
    sizes = [(h, w)]
    for _ in range(3):
        h, w = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        sizes.append((h, w))
    return sizes


def test_encoder_spatial_sizes_follow_conv_formula():
    cfg = cae.CAEConfig(**SMALL)
    g = cae.build_cae(cfg)
    shapes = g.infer_shapes(g.input_shapes)
    expected = _conv_sizes(128, 126)
    assert expected[1:] == [(64, 63), (32, 32), (16, 16)]
    for i, hw in enumerate(expected[1:], start=1):
        assert shapes[f"enc_narrowband_{i}"][2:] == hw
    assert shapes["enc_4"][2:] == (8, 8)
    assert shapes["rec_narrowband"] == (1, 1, 128, 126)


@pytest.mark.parametrize("n_branches", [1, 2, 3])
def test_reconstruction_shapes_equal_inputs(n_branches):
    cfg = cae.CAEConfig(branch_specs=SPECS[:n_branches], **SMALL)
    g = cae.build_cae(cfg)
    x = _images(2, cfg.branch_specs, 0)
    out = g.forward({f"in_{n}": x.images[n][:, None].astype(np.float32) for n in cfg.branch_names})
    assert len(g.outputs) == n_branches
    for n in cfg.branch_names:
        assert out[f"rec_{n}"].shape == (2, 1, 128, 126)
        assert np.all((out[f"rec_{n}"] > 0) & (out[f"rec_{n}"] < 1))
    assert out["bottleneck"].shape == (2, cfg.bottleneck_dim)


def test_concat_channels_are_branch_sum():
    g = cae.build_cae(cae.CAEConfig(branch_specs=SPECS[:2]))
    shapes = g.infer_shapes(g.input_shapes)
    assert shapes["joint"][1] == 64 + 64
    assert g.node("split").layer.sizes == [64, 64]


@pytest.mark.parametrize("n_branches", [1, 2, 3])
def test_decoder_mirrors_encoder(n_branches):
    cfg = cae.CAEConfig(branch_specs=SPECS[:n_branches], **SMALL)
    g = cae.build_cae(cfg)
    for n in cfg.branch_names:
        enc = [x for x in g.nodes if x.name.startswith(f"enc_{n}_conv") and isinstance(x.layer, nn.Conv2d)]
        dec = [x for x in g.nodes if x.name.startswith(f"dec_{n}_deconv") and isinstance(x.layer, nn.ConvTranspose2d)]
        assert len(enc) == len(dec) == 3
    kinds = [type(x.layer) for x in g.nodes]
    assert kinds.count(nn.Concat) == kinds.count(nn.Split) == (1 if n_branches > 1 else 0)


def test_config_validation():
    with pytest.raises(ValueError):
        cae.CAEConfig(branch_specs=[])
    with pytest.raises(ValueError):
        cae.CAEConfig(branch_specs=SPECS + [dsp.WIDEBAND])
    with pytest.raises(ValueError):
        cae.CAEConfig(bottleneck_dim=0)
    with pytest.raises(ValueError, match="zero size"):
        cae.build_cae(cae.CAEConfig(kernel=3, stride=64, padding=0, **SMALL))


def test_config_dict_round_trip():
    cfg = cae.CAEConfig(branch_specs=SPECS[:2], **SMALL)
    assert cae.CAEConfig.from_dict(cfg.to_dict()) == cfg


def _train(cfg, train, valid):
    g = cae.build_cae(cfg)
    return g, cae.train_autoencoder(g, train, valid, cfg)


def test_training_halves_loss():
    cfg = cae.CAEConfig(epochs=20, patience=20, learning_rate=3e-3, batch_size=16, **SMALL)
    train, valid = _images(200, cfg.branch_specs, 1, 20), _images(20, cfg.branch_specs, 2)
    valid.speaker_ids = [f"v{i}" for i in range(20)]
    _, rep = _train(cfg, train, valid)
    assert len(rep.train_loss) == 21
    assert rep.train_loss[-1] < 0.5 * rep.train_loss[0]
    assert rep.valid_loss[rep.best_epoch] <= rep.valid_loss[0]
    assert rep.final_valid_loss == min(rep.valid_loss)


def test_patience_zero_stops_at_first_increase(monkeypatch):
    cfg = cae.CAEConfig(epochs=50, patience=0, **SMALL)
    curve = iter([1.0, 0.9, 0.8, 0.85, 0.7, 0.6])

    def fake_loss(graph, images, config):
        return next(curve) if images.speaker_ids[0].startswith("v") else 0.5

    monkeypatch.setattr(cae, "reconstruction_loss", fake_loss)
    train, valid = _images(4, cfg.branch_specs, 0), _images(2, cfg.branch_specs, 1)
    valid.speaker_ids = ["v0", "v1"]
    _, rep = _train(cfg, train, valid)
    assert rep.stopped_early
    # epoch 0 untrained, then 0.9, 0.8, 0.85 -> stop
    assert rep.valid_loss == [1.0, 0.9, 0.8, 0.85]
    assert rep.best_epoch == 2


def test_training_is_deterministic():
    cfg = cae.CAEConfig(epochs=3, **SMALL)
    train, valid = _images(12, cfg.branch_specs, 3, 4), _images(4, cfg.branch_specs, 4)
    valid.speaker_ids = [f"v{i}" for i in range(4)]
    (g1, r1), (g2, r2) = _train(cfg, train, valid), _train(cfg, train, valid)
    assert r1 == r2
    p1, p2 = g1.parameters(), g2.parameters()
    assert all(np.array_equal(p1[k], p2[k]) for k in p1)


def test_training_rejects_bad_sets():
    cfg = cae.CAEConfig(epochs=1, **SMALL)
    g = cae.build_cae(cfg)
    a = _images(4, cfg.branch_specs, 0, 2)
    with pytest.raises(ValueError, match="both training and validation"):
        cae.train_autoencoder(g, a, a, cfg)
    with pytest.raises(ValueError, match="non-empty"):
        cae.train_autoencoder(g, a, a.subset([]), cfg)
    wb = _images(2, [dsp.WIDEBAND], 1)
    wb.speaker_ids = ["x", "y"]
    with pytest.raises(ValueError, match="lacks"):
        cae.train_autoencoder(g, a, wb, cfg)


@pytest.fixture(scope="module")
def overfit():
    """Autoencoder trained to memorise one wideband image."""
    cfg = cae.CAEConfig(branch_specs=[dsp.WIDEBAND], epochs=300, patience=300, learning_rate=1e-2,
                        batch_size=1, dtype="float64", **SMALL)
    img = _images(1, cfg.branch_specs, 5)
    valid = cae.ImageSet(img.images, ["v"])
    g, rep = _train(cfg, img, valid)
    return cfg, g, img.images["wideband"][0], rep


def test_overfit_single_image_has_near_zero_errors(overfit):
    cfg, g, img, _ = overfit
    fv = cae.extract_features(g, {"wideband": img}, cfg)
    assert fv.recon_errors["wideband"].shape == (64,)
    assert np.max(fv.recon_errors["wideband"]) < 1e-3


def test_band_perturbation_raises_that_band_error(overfit):
    cfg, g, img, _ = overfit
    base = cae.extract_features(g, {"wideband": img}, cfg).recon_errors["wideband"]
    for band in (0, 17, 63):
        rows = cae.band_groups(128, 64)[band]
        bumped = img.copy()
        bumped[rows] += 0.5
        err = cae.extract_features(g, {"wideband": bumped}, cfg).recon_errors["wideband"]
        assert err[band] > base[band]


def test_band_errors_match_direct_computation(overfit):
    cfg, g, img, _ = overfit
    fv = cae.extract_features(g, {"wideband": img}, cfg)
    rec = g.forward({"in_wideband": img[None, None]})["rec_wideband"][0, 0]
    sq = (rec - img) ** 2
    direct = np.array([sq[2 * k : 2 * k + 2].mean() for k in range(64)])
    assert np.allclose(fv.recon_errors["wideband"], direct, rtol=1e-12, atol=0)
    assert np.all(fv.recon_errors["wideband"] >= 0)


@pytest.mark.parametrize("n_branches", [1, 2, 3])
def test_feature_lengths(n_branches):
    cfg = cae.CAEConfig(branch_specs=SPECS[:n_branches], **SMALL)
    g = cae.build_cae(cfg)
    x = _images(3, cfg.branch_specs, 0)
    fv = cae.extract_features(g, {n: x.images[n][0] for n in cfg.branch_names}, cfg)
    assert fv.bottleneck.shape == (cfg.bottleneck_dim,)
    assert {n: v.shape[0] for n, v in fv.recon_errors.items()} == {s.name: s.n_bands for s in cfg.branch_specs}
    F = cae.feature_matrix(g, x, cfg)
    assert F.shape == (3, cae.feature_dim(cfg))
    assert np.allclose(F[0], fv.as_array(), rtol=1e-5, atol=1e-6)  # float32 batch vs single
    assert cae.feature_matrix(g, x, cfg, "bottleneck").shape[1] == cfg.bottleneck_dim
    assert cae.feature_matrix(g, x, cfg, "errors").shape[1] == sum(s.n_bands for s in cfg.branch_specs)


def test_extract_features_is_pure():
    cfg = cae.CAEConfig(branch_specs=SPECS[:2], **SMALL)
    g = cae.build_cae(cfg)
    x = _images(1, cfg.branch_specs, 0)
    imgs = {n: x.images[n][0] for n in cfg.branch_names}
    a, b = cae.extract_features(g, imgs, cfg), cae.extract_features(g, imgs, cfg)
    assert np.array_equal(a.bottleneck, b.bottleneck)
    assert all(np.array_equal(a.recon_errors[n], b.recon_errors[n]) for n in cfg.branch_names)


def test_extract_features_shape_errors():
    cfg = cae.CAEConfig(**SMALL)
    g = cae.build_cae(cfg)
    with pytest.raises(nn.ShapeError):
        cae.extract_features(g, {"narrowband": np.zeros((128, 125))}, cfg)
    with pytest.raises(ValueError, match="missing"):
        cae.extract_features(g, {"wideband": np.zeros((128, 126))}, cfg)


def test_anomaly_premise_small():
    cfg = cae.CAEConfig(branch_specs=[dsp.WIDEBAND], epochs=15, patience=15, learning_rate=3e-3, **SMALL)
    train = _images(120, cfg.branch_specs, 10, 30)
    valid = _images(20, cfg.branch_specs, 11)
    valid.speaker_ids = [f"v{i}" for i in range(20)]
    g, _ = _train(cfg, train, valid)
    lively = cae.extract_batch(g, _images(40, cfg.branch_specs, 12), cfg)[1]["wideband"].sum(axis=1)
    flat = cae.extract_batch(g, _images(40, cfg.branch_specs, 13, monotone=True), cfg)[1]["wideband"].sum(axis=1)
    se = np.sqrt(lively.var(ddof=1) / 40 + flat.var(ddof=1) / 40)
    assert abs(lively.mean() - flat.mean()) > 3 * se
