import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bionic import model as bm
from bionic.connectome import ConnectivityMasks, FormatError
from bionic.core import Parameter, RngStream, ShapeError, Tensor, grad_check, no_grad

SMALL = (6, 5, 4, 7)


def random_masks(sizes, seed=0, density=0.5):
    rng = np.random.default_rng(seed)
    inter = [rng.random((sizes[k], sizes[k - 1])) < density for k in range(1, 4)]
    intra = []
    for n in sizes:
        m = rng.random((n, n)) < density
        np.fill_diagonal(m, False)
        intra.append(m)
    inhib = [rng.integers(0, 5, n) for n in sizes]
    return ConnectivityMasks(tuple(sizes), inter, intra, inhib)


def small_model(seed=0, dtype=np.float32, **kw):
    cfg = bm.BioNicConfig(layer_sizes=SMALL, image_size=8, **kw)
    return bm.BioNicModel(cfg, random_masks(SMALL, seed), RngStream(seed, "init"), dtype=dtype)


def batch(b=3, side=8, seed=1, dtype=np.float32):
    return Tensor(np.random.default_rng(seed).random((b, 1, side, side)), dtype=dtype)


# -- reference implementations --------------------------------------------------

def naive_conv(x, w, b, pad):
    x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, _, hh, ww = x.shape
    co, ci, k, _ = w.shape
    out = np.zeros((n, co, hh - k + 1, ww - k + 1))
    for i in range(out.shape[2]):
        for j in range(out.shape[3]):
            patch = x[:, :, i:i + k, j:j + k]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w)
    return out + b[None, :, None, None]


def naive_avg3(h):
    n, c, hh, ww = h.shape
    out = np.zeros_like(h)
    for i in range(hh):
        for j in range(ww):
            win = h[:, :, max(i - 1, 0):i + 2, max(j - 1, 0):j + 2]
            out[:, :, i, j] = win.mean(axis=(2, 3))
    return out


def naive_pool(h):
    n, c, hh, ww = h.shape
    return h.reshape(n, c, hh // 2, 2, ww // 2, 2).max(axis=(3, 5))


def naive_ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def sig(z):
    return 1 / (1 + np.exp(-z))


def reference_forward(m, x):
    """Direct numpy evaluation of the pipeline from the model's weights."""
    c = m.config
    p = {k: v.data.astype(np.float64) for k, v in m.params.items()}
    h = x.astype(np.float64)
    if c.use_conv_stem:
        h = naive_conv(h, p["conv1.weight"], p["conv1.bias"], 1)
        if c.use_lateral_inhibition:
            h = h - c.lateral_alpha * naive_avg3(h)
        h = np.maximum(h, 0)
        h = np.maximum(naive_conv(h, p["conv2.weight"], p["conv2.bias"], 1), 0)
        h = naive_pool(h)
        if c.use_attention:
            z = h.mean(axis=(2, 3))
            s = sig(np.maximum(z @ p["channel_att.fc1.weight"].T + p["channel_att.fc1.bias"], 0)
                    @ p["channel_att.fc2.weight"].T + p["channel_att.fc2.bias"])
            h = h * s[:, :, None, None]
            cat = np.concatenate([h.mean(1, keepdims=True), h.max(1, keepdims=True)], axis=1)
            h = h * sig(naive_conv(cat, p["spatial_att.conv.weight"], p["spatial_att.conv.bias"], 1))
        h = naive_pool(h)
    h = h.reshape(len(h), -1) @ p["proj.weight"].T + p["proj.bias"]
    if c.use_layer_norm:
        h = naive_ln(h, p["ln_proj.gain"], p["ln_proj.bias"])
    names = "ABCD"
    for k, n in enumerate(names):
        if k:
            tag = f"inter_{names[k - 1]}{n}"
            w = p[f"{tag}.weight"] * (m.masks.inter[k - 1] if c.use_masks else 1)
            pre = h @ w.T + p[f"{tag}.bias"]
        else:
            pre = h
        comb = pre
        if c.use_intra_layer:
            u = p[f"intra_{n}.weight"] * (m.masks.intra[k] if c.use_masks else 1)
            comb = pre + pre @ u.T + p[f"intra_{n}.bias"]
        if c.use_graded_inhibition:
            inh = m.masks.inhibitory[k].astype(np.float64)
            comb = comb * (1 - sig(p[f"inhib_{n}.alpha"]) * inh / (inh.max() + c.inhib_eps))
        if c.use_layer_norm:
            comb = naive_ln(comb, p[f"ln_{n}.gain"], p[f"ln_{n}.bias"])
        h = np.maximum(comb, 0)
    if c.use_layer_norm:
        h = naive_ln(h, p["ln_out.gain"], p["ln_out.bias"])
    return h @ p["classifier.weight"].T + p["classifier.bias"]


# -- stages ---------------------------------------------------------------------

def test_lateral_inhibition_identity_and_constant():
    h = batch(2, 6)
    np.testing.assert_array_equal(bm.lateral_inhibition(h, 0.0).data, h.data)
    c = Tensor(np.full((1, 2, 5, 5), 0.8, np.float32))
    np.testing.assert_allclose(bm.lateral_inhibition(c, 0.3).data, 0.7 * 0.8, rtol=1e-6)


def test_lateral_inhibition_hand_patch():
    patch = np.arange(1, 10, dtype=np.float64).reshape(1, 1, 3, 3)
    out = bm.lateral_inhibition(Tensor(patch), 0.3).data
    # centre sees all nine cells (mean 5); corner (0,0) sees 1,2,4,5 (mean 3)
    assert out[0, 0, 1, 1] == pytest.approx(5 - 0.3 * 5)
    assert out[0, 0, 0, 0] == pytest.approx(1 - 0.3 * 3)
    np.testing.assert_allclose(out, patch - 0.3 * naive_avg3(patch), atol=1e-12)


def test_channel_attention_zero_weights_halves():
    x = batch(2, 4).data.repeat(16, axis=1)
    x = Tensor(x)
    z2, z16 = [Tensor(np.zeros(s, np.float32)) for s in ((2, 16), (16, 2))]
    out = bm.channel_attention(x, z2, Tensor(np.zeros(2, np.float32)), z16, Tensor(np.zeros(16, np.float32)))
    np.testing.assert_allclose(out.data, x.data / 2, rtol=1e-6)


def test_channel_attention_grad_check():
    rng = np.random.default_rng(3)
    x = Parameter(rng.standard_normal((2, 16, 4, 4)), dtype=np.float64)
    ps = [Parameter(rng.standard_normal(s) * 0.5, dtype=np.float64) for s in ((2, 16), (2,), (16, 2), (16,))]
    w = Tensor(rng.standard_normal((2, 16, 4, 4)))
    rep = grad_check(lambda: (bm.channel_attention(x, *ps) * w).sum(), {"x": x, **{f"p{i}": p for i, p in enumerate(ps)}})
    assert rep.passed(1e-4), rep


def test_spatial_attention_zero_weights_and_hand_case():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]], [[0.5, -1.0], [5.0, 0.0]]]]))
    out = bm.spatial_attention(x, Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros(1)))
    np.testing.assert_allclose(out.data, x.data / 2)
    w = np.random.default_rng(4).standard_normal((1, 2, 3, 3))
    out = bm.spatial_attention(x, Tensor(w), Tensor(np.array([0.1])))
    cat = np.concatenate([x.data.mean(1, keepdims=True), x.data.max(1, keepdims=True)], axis=1)
    expected = x.data * sig(naive_conv(cat, w, np.array([0.1]), 1))
    assert out.shape == x.shape
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_inhibition_scaling_examples():
    a = Tensor(np.zeros(1))
    np.testing.assert_array_equal(bm.inhibition_scaling(np.zeros(5), a).data, np.ones(5))
    np.testing.assert_allclose(bm.inhibition_scaling(np.array([0, 2, 4]), a, eps=0.0).data, [1.0, 0.75, 0.5])
    s = bm.inhibition_scaling(np.array([0, 2, 4]), Tensor(np.array([-40.0]))).data
    np.testing.assert_allclose(s, 1.0, atol=1e-15)


@given(st.lists(st.integers(0, 50), min_size=1, max_size=20), st.floats(-10, 10))
def test_inhibition_scaling_range(counts, raw):
    s = bm.inhibition_scaling(np.array(counts), Tensor(np.array([raw]))).data
    assert np.all(s > 0) and np.all(s <= 1)


# -- Hebbian rule ---------------------------------------------------------------

def test_hebbian_delta_examples():
    dw = bm.hebbian_delta(np.array([[1.0, 0.0]]), np.array([[0.35]]), 5e-4, 5e-4, 0.35)
    np.testing.assert_allclose(dw, [[5e-4 * 0.35, 0]], atol=1e-15)
    dw = bm.hebbian_delta(np.array([[1.0, 0.0]]), np.array([[1.0]]), 5e-4, 5e-4, 1.0)
    np.testing.assert_allclose(dw, [[5e-4, 0.0]], atol=1e-15)
    mask = np.array([[True, False, True]] * 2)
    dw = bm.hebbian_delta(np.zeros((4, 3)), np.zeros((4, 2)), 5e-4, 5e-4, 0.35, mask)
    np.testing.assert_allclose(dw, np.where(mask, 5e-4 * 0.35, 0.0), atol=1e-15)
    assert np.all(dw[~mask] == 0)


def test_hebbian_delta_matches_loop_oracle():
    rng = np.random.default_rng(5)
    pre, post = rng.random((6, 4)), rng.random((6, 3))
    mask = rng.random((3, 4)) < 0.6
    dw = bm.hebbian_delta(pre, post, 5e-4, 5e-4, 0.35, mask)
    for i in range(3):
        for j in range(4):
            corr = sum(post[b, i] * pre[b, j] for b in range(6)) / 6
            f = sum(post[b, i] for b in range(6)) / 6
            want = (5e-4 * corr - 5e-4 * (f - 0.35)) if mask[i, j] else 0.0
            assert dw[i, j] == pytest.approx(want, abs=1e-12)


def test_normalize_activity():
    np.testing.assert_array_equal(bm.normalize_activity(np.full((3, 2), 4.0)), np.zeros((3, 2)))
    out = bm.normalize_activity(np.array([[1.0, 3.0], [2.0, 5.0]]))
    np.testing.assert_allclose(out, [[0, 0.5], [0.25, 1]])


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_hebbian_step_bounded(seed):
    rng = np.random.default_rng(seed)
    w = Parameter(rng.standard_normal((5, 4)), mask=rng.random((5, 4)) < 0.5, dtype=np.float64)
    before = w.data.copy()
    cfg = bm.BioNicConfig()
    bm.hebbian_update(w, rng.standard_normal((8, 4)) * 3, rng.standard_normal((8, 5)), cfg)
    assert np.max(np.abs(w.data - before)) <= cfg.hebb_lr + cfg.home_lr + 1e-15
    assert np.all(w.data[~w.mask] == 0)


def test_apply_hebbian_touches_only_inter_weights():
    m = small_model()
    before = m.state_dict()
    m.forward(batch(), "train", RngStream(0, "noise"))
    m.apply_hebbian()
    after = m.state_dict()
    changed = {k for k in before if not np.array_equal(before[k], after[k])}
    assert changed == {"inter_AB.weight", "inter_BC.weight", "inter_CD.weight"}
    for w in m.inter_layer_weights():
        assert np.all(w.data[~w.mask] == 0)


# -- full forward ---------------------------------------------------------------

def test_forward_shape_and_finite_full_size():
    m = bm.BioNicModel(bm.BioNicConfig(), rng=RngStream(0, "init"))
    x = Tensor(np.random.default_rng(0).random((2, 1, 48, 48)), dtype=np.float32)
    with no_grad():
        out = m.forward(x, "train", RngStream(0, "noise"))
    assert out.shape == (2, 7) and np.all(np.isfinite(out.data))
    assert m.flat_features == 2304


def test_forward_rejects_bad_batch():
    m = small_model()
    with pytest.raises(ShapeError, match="expected batch"):
        m.forward(batch(side=10))
    with pytest.raises(ShapeError):
        m.forward(Tensor(np.zeros((3, 8, 8), np.float32)))


def test_eval_forward_is_deterministic():
    m = small_model()
    x = batch()
    a, b = m.forward(x, "eval").data, m.forward(x, "eval").data
    assert a.tobytes() == b.tobytes()
    t = m.forward(x, "train", RngStream(0, "noise")).data
    assert not np.array_equal(a, t)


@pytest.mark.parametrize("toggles", [
    {},
    {t: False for t in bm.TOGGLES},
    {t: False for t in bm.TOGGLES if t != "use_conv_stem"},
    {"use_masks": False, "use_attention": False},
    {"use_layer_norm": False, "use_graded_inhibition": False},
])
def test_forward_matches_reference(toggles):
    m = small_model(seed=2, dtype=np.float64, **toggles)
    for p in m.params.values():
        if p.name.endswith("alpha"):
            p.data = np.array([0.7])
    x = batch(dtype=np.float64)
    np.testing.assert_allclose(m.forward(x, "eval").data, reference_forward(m, x.data), rtol=1e-10, atol=1e-12)


def test_all_toggles_off_is_plain_mlp_exactly():
    m = small_model(seed=3, dtype=np.float64, **{t: False for t in bm.TOGGLES})
    assert "intra_A.weight" not in m.params and "ln_A.gain" not in m.params
    x = batch(dtype=np.float64)
    p = {k: v.data for k, v in m.params.items()}
    h = np.maximum(x.data.reshape(3, -1) @ p["proj.weight"].T + p["proj.bias"], 0)
    for tag in ("inter_AB", "inter_BC", "inter_CD"):
        h = np.maximum(h @ p[f"{tag}.weight"].T + p[f"{tag}.bias"], 0)
    ref = h @ p["classifier.weight"].T + p["classifier.bias"]
    assert np.max(np.abs(m.forward(x, "eval").data - ref)) == 0


def test_inhibition_monotone():
    m = small_model(seed=4, dtype=np.float64, use_layer_norm=False)
    comb = Tensor(np.abs(np.random.default_rng(0).standard_normal(6)) + 0.1)
    alpha = m.params["inhib_A.alpha"]
    counts = np.array([0, 1, 2, 3, 4, 5])
    base = (comb * bm.inhibition_scaling(counts, alpha)).data
    bumped = counts.copy()
    bumped[2] += 1
    more = (comb * bm.inhibition_scaling(bumped, alpha)).data
    assert more[2] <= base[2]


def test_full_model_grad_check():
    sizes = (8, 6, 4, 5)
    cfg = bm.BioNicConfig(layer_sizes=sizes, image_size=8, use_synaptic_noise=False)
    m = bm.BioNicModel(cfg, random_masks(sizes), RngStream(0, "init"), dtype=np.float64)
    x = batch(2, seed=0, dtype=np.float64)
    w = Tensor(np.random.default_rng(0).standard_normal((2, 7)))
    rep = grad_check(lambda: (m.forward(x, "eval") * w).sum(), dict(m.params), max_entries=200,
                     rng=np.random.default_rng(1))
    assert rep.passed(1e-4), rep


def test_masked_grads_are_zero():
    m = small_model()
    m.forward(batch(), "train", RngStream(0, "noise")).sum().backward()
    for p in m.parameters():
        if p.mask is not None:
            assert np.all(p.grad[~p.mask] == 0)
            assert np.all(p.data[~p.mask] == 0)


def test_noise_statistics_at_injection_point():
    cfg = bm.BioNicConfig(layer_sizes=(4, 4, 4, 4), image_size=4, use_conv_stem=False)
    m = bm.BioNicModel(cfg, random_masks((4, 4, 4, 4)), RngStream(0, "init"))
    m.to_dtype(np.float64)
    x = Tensor(np.ones((10_000, 1, 4, 4)))
    with no_grad():
        m.forward(x, "train", RngStream(0, "noise"))
    acts = m.last_activations
    # layer A sees a fixed input, so its spread across the batch is the injected noise alone
    std = acts[0].std(axis=0, ddof=1)
    np.testing.assert_allclose(std, cfg.noise_sigma, rtol=0.05)


def test_config_validation_and_digest():
    with pytest.raises(ValueError, match="f_target"):
        bm.BioNicConfig(f_target=1.0)
    with pytest.raises(ValueError, match="noise_sigma"):
        bm.BioNicConfig(noise_sigma=-0.1)
    a, b = bm.BioNicConfig(), bm.BioNicConfig(use_attention=False)
    assert a.digest() != b.digest() and a.digest() == bm.BioNicConfig().digest()
    assert bm.BioNicConfig.from_dict(b.to_dict()) == b


# -- counts, baseline -----------------------------------------------------------

def test_parameter_count_column_shapes():
    m = bm.BioNicModel(bm.BioNicConfig(), random_masks((266, 349, 185, 383), density=0.1))
    full = bm.parameter_count(m)
    assert full["classifier"] == 383 * 7 + 7 == 2688
    assert full["proj"] == 2304 * 266 + 266
    sparse = bm.parameter_count(m, include_masked=False)
    diff = {k for k in full if full[k] != sparse[k]}
    assert diff == {"inter_AB", "inter_BC", "inter_CD", "intra_A", "intra_B", "intra_C", "intra_D", "total"}
    assert sparse["inter_AB"] == int(m.masks.inter[0].sum()) + 349


def test_standard_baseline():
    base = bm.build_standard_baseline()
    assert all(p.mask is None for p in base.parameters())
    assert not any(k.startswith(("intra", "ln", "inhib", "channel", "spatial")) for k in base.params)
    counts = bm.parameter_count(base)
    expected = (8 * 9 + 8) + (16 * 72 + 16) + (2304 * 266 + 266) + (266 * 349 + 349) + (349 * 185 + 185) \
        + (185 * 383 + 383) + 2688
    assert counts["total"] == expected
    x = Tensor(np.random.default_rng(0).random((2, 1, 48, 48)), dtype=np.float32)
    with no_grad():
        assert base.forward(x, "train").shape == (2, 7)


def test_decay_exempt_flags():
    m = small_model()
    exempt = {k for k, p in m.params.items() if p.decay_exempt}
    assert exempt and all(k.startswith(("ln", "inhib")) for k in exempt)
    assert all(m.params[k].decay_exempt for k in m.params if k.startswith("ln"))


def test_init_is_seeded_and_bounded():
    a, b, c = small_model(seed=7), small_model(seed=7), small_model(seed=8)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert not np.array_equal(a.params["proj.weight"].data, c.params["proj.weight"].data)
    assert np.all(np.abs(a.params["proj.weight"].data) <= 1 / np.sqrt(a.flat_features))
    assert np.all(a.params["proj.bias"].data == 0)


# -- checkpoints ----------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    from bionic.core import Adam, cross_entropy
    m = small_model(seed=9)
    opt = Adam(m.parameters(), lr=1e-3)
    cross_entropy(m.forward(batch(), "train", RngStream(0, "noise")), [0, 1, 2]).backward()
    opt.step()
    bm.save_checkpoint(m, tmp_path / "m.bnck", opt, meta={"seed": 9})
    opt2 = Adam([], lr=0.0)
    back, ckpt = bm.load_checkpoint(tmp_path / "m.bnck", m.masks, opt2)
    assert ckpt["meta"] == {"seed": 9} and back.config == m.config
    x = batch()
    assert back.forward(x).data.tobytes() == m.forward(x).data.tobytes()
    assert opt2.state.step == 1 and opt2.lr == pytest.approx(1e-3)
    np.testing.assert_array_equal(opt2.state.m[0], opt.state.m[0])


def test_checkpoint_refuses_other_connectome(tmp_path):
    m = small_model(seed=9)
    bm.save_checkpoint(m, tmp_path / "m.bnck")
    with pytest.raises(ValueError, match="connectome"):
        bm.load_checkpoint(tmp_path / "m.bnck", random_masks(SMALL, seed=10))


def test_checkpoint_format_errors(tmp_path):
    m = small_model()
    path = tmp_path / "m.bnck"
    bm.save_checkpoint(m, path)
    blob = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError, match="magic"):
        bm.read_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(blob[:len(blob) // 2])
    with pytest.raises(FormatError, match="truncated"):
        bm.read_checkpoint(tmp_path / "short")
