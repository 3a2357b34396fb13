import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from upmixflow import tensor as T
from upmixflow.tensor import Tensor, adam_init
from upmixflow.velocity import (
    CheckpointVersionError,
    ConfigMismatchError,
    CorruptCheckpointError,
    NetConfig,
    film,
    forward,
    init_parameters,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
    sinusoidal_features,
    time_embed,
)

from conftest import check_grads

TINY = NetConfig(num_blocks=1, hidden_dim=8, num_heads=2, latent_dim=2, target_channels=3,
                 cond_channels=2, time_embed_dim=8, max_frames=6, ff_mult=2)


def randomized(cfg, seed=0, std=0.3):
    """A net with every parameter (including the zero-initialised ones) perturbed."""
    net = init_parameters(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    for p in net.params.values():
        p.data = p.data + rng.normal(0.0, std, p.shape)
    return net


def _grads(build, params):
    with T.Tape() as tape:
        loss = build()
    return T.backward(loss, tape, params)


def _split_key_biases(net):
    """Key biases add a per-query constant to the attention logits, which softmax
    ignores; their exact gradient is 0, so finite differences only see round-off."""
    key_bias = {k: p for k, p in net.params.items() if k.endswith(".k.b")}
    rest = {k: p for k, p in net.params.items() if k not in key_bias}
    return rest, key_bias


def latents(cfg, frames, rng, batch=None):
    lead = () if batch is None else (batch,)
    zt = rng.standard_normal(lead + (cfg.target_channels, cfg.latent_dim, frames))
    zc = rng.standard_normal(lead + (cfg.cond_channels, cfg.latent_dim, frames))
    return zt, zc


def test_desk_and_full_profiles():
    d = NetConfig.desk()
    assert (d.num_blocks, d.num_heads, d.hidden_dim) == (2, 4, 64)
    f = NetConfig.full()
    assert (f.num_blocks, f.num_heads, f.hidden_dim, f.latent_dim) == (12, 16, 1024, 64)
    with pytest.raises(ValueError):
        NetConfig(hidden_dim=10, num_heads=4)


def test_parameter_count_desk():
    net = init_parameters(NetConfig.desk(), 0)
    assert net.num_parameters() == parameter_count(NetConfig.desk()) == 194496


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.sampled_from([(4, 1), (8, 2), (12, 3), (16, 4)]), st.integers(1, 4),
       st.integers(1, 4), st.integers(1, 3), st.integers(1, 6), st.booleans(), st.booleans(),
       st.booleans(), st.integers(0, 100))
def test_shape_and_count_over_configs(blocks, hh, d, c, cc, frames, use_film, cross, skip, seed):
    h, heads = hh
    cfg = NetConfig(num_blocks=blocks, hidden_dim=h, num_heads=heads, latent_dim=d,
                    target_channels=c, cond_channels=cc, time_embed_dim=6, max_frames=8,
                    ff_mult=2, use_film=use_film, use_cross_attention=cross, latent_skip=skip)
    net = randomized(cfg, seed)
    assert net.num_parameters() == parameter_count(cfg)
    rng = np.random.default_rng(seed)
    zt, zc = latents(cfg, frames, rng)
    assert net(zt, 0.3, zc).shape == zt.shape
    zt, zc = latents(cfg, frames, rng, batch=2)
    assert net(zt, np.array([0.1, 0.9]), zc).shape == zt.shape


def test_batched_matches_single(rng):
    net = randomized(TINY)
    zt, zc = latents(TINY, 5, rng, batch=3)
    ts = np.array([0.0, 0.4, 1.0])
    batched = net(zt, ts, zc)
    for i in range(3):
        np.testing.assert_allclose(batched[i], net(zt[i], ts[i], zc[i]), rtol=1e-12, atol=1e-13)


def test_seed_determinism():
    a = init_parameters(TINY, 7).state_arrays()
    b = init_parameters(TINY, 7).state_arrays()
    c = init_parameters(TINY, 8).state_arrays()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_fresh_net_is_zero_field(rng):
    net = init_parameters(NetConfig.desk(), 3)
    zt, zc = latents(net.config, 4, rng)
    assert np.all(net(zt * 100, 0.7, zc) == 0.0)


def test_init_scale():
    net = init_parameters(NetConfig.desk(), 0)
    w = net.params["blocks.0.self.q.w"].data
    assert abs(w.std() - 0.02) < 0.002
    assert np.all(net.params["blocks.0.self.q.b"].data == 0)
    assert np.all(net.params["final_norm.g"].data == 1)


def test_condition_permutation_changes_output(rng):
    for seed in range(3):
        net = randomized(TINY, seed)
        zt, zc = latents(TINY, 5, rng)
        perm = zc[..., [4, 2, 0, 3, 1]]
        assert np.max(np.abs(net(zt, 0.5, zc) - net(zt, 0.5, perm))) > 1e-6


def test_condition_sensitivity_via_cross_attention_only(rng):
    cfg = NetConfig(**{**TINY.__dict__, "use_film": False, "latent_skip": False})
    net = randomized(cfg)
    zt, zc = latents(cfg, 4, rng)
    assert np.max(np.abs(net(zt, 0.5, zc) - net(zt, 0.5, zc[..., ::-1]))) > 1e-6


def test_forward_errors(rng):
    net = randomized(TINY)
    zt, zc = latents(TINY, 4, rng)
    with pytest.raises(T.ShapeError):
        net(zt, 0.5, zc[..., :3])
    with pytest.raises(T.ShapeError):
        net(zt[:2], 0.5, zc)
    with pytest.raises(T.ShapeError):
        net(*latents(TINY, 7, rng)[:1], 0.5, latents(TINY, 7, rng)[1])
    bad = zt.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(T.NonFiniteError):
        net(bad, 0.5, zc)
    with pytest.raises(ValueError):
        net(zt, 1.5, zc)


def test_forward_is_bit_reproducible(rng):
    net = randomized(TINY)
    zt, zc = latents(TINY, 5, rng)
    assert np.array_equal(net(zt, 0.25, zc), net(zt, 0.25, zc))


def test_sinusoidal_at_zero():
    f = sinusoidal_features(0.0, 16)
    assert np.all(f[0, :8] == 0.0) and np.all(f[0, 8:] == 1.0)
    with pytest.raises(ValueError):
        sinusoidal_features(-0.01, 16)


def test_time_embedding_distinct_on_grid():
    net = randomized(NetConfig.desk())
    grid = np.round(np.arange(1001) * 1e-3, 12)
    feat = sinusoidal_features(grid, 64)
    emb = time_embed(net, grid).data
    for x in (feat, emb):
        gaps = np.linalg.norm(np.diff(x, axis=0), axis=1)
        assert gaps.min() > 1e-3
        assert len({row.tobytes() for row in x}) == grid.size
    np.testing.assert_array_equal(emb, time_embed(net, grid).data)


def test_film_identity_and_hand_value(rng):
    x = Tensor(rng.standard_normal((5, 4)))
    zero = Tensor(np.zeros(4))
    np.testing.assert_array_equal(film(x, zero, zero).data, x.data)
    out = film(Tensor(np.ones((1, 4))), Tensor(np.ones(4)), Tensor(np.full(4, 2.0)))
    np.testing.assert_array_equal(out.data, np.full((1, 4), 4.0))
    with pytest.raises(T.ShapeError):
        film(x, Tensor(np.zeros(3)), zero)


def test_film_gradients(rng):
    ts = {"x": Tensor(rng.standard_normal((3, 5, 4)), requires_grad=True),
          "s": Tensor(rng.standard_normal((3, 4)), requires_grad=True),
          "b": Tensor(rng.standard_normal((3, 4)), requires_grad=True)}
    w = rng.standard_normal((3, 5, 4))
    build = lambda: T.tsum(T.mul(film(ts["x"], ts["s"], ts["b"]), Tensor(w)))  # noqa: E731
    assert check_grads(build, ts) < 1e-5


def test_full_net_gradient_desk(rng):
    net = randomized(NetConfig.desk(), seed=5, std=0.05)
    zt, zc = latents(net.config, 3, rng)

    def build():
        v = forward(net, zt, 0.37, zc)
        return T.tsum(T.mul(v, v))

    checked, shift_invariant = _split_key_biases(net)
    assert check_grads(build, checked, max_entries=3, rng=np.random.default_rng(0)) < 1e-4
    g = _grads(build, shift_invariant)
    assert all(np.abs(v.data).max() < 1e-12 for v in g.values())


def test_full_net_gradient_every_entry_tiny(rng):
    net = randomized(TINY, seed=2)
    zt, zc = latents(TINY, 3, rng, batch=2)

    def build():
        v = forward(net, zt, np.array([0.2, 0.8]), zc)
        return T.tsum(T.mul(v, v))

    checked, shift_invariant = _split_key_biases(net)
    assert check_grads(build, checked) < 1e-5
    g = _grads(build, shift_invariant)
    assert all(np.abs(v.data).max() < 1e-12 for v in g.values())


def test_checkpoint_round_trip(tmp_path, rng):
    net = randomized(TINY)
    opt = adam_init(net.params)
    opt.step = 17
    for k in opt.m:
        opt.m[k] = rng.standard_normal(opt.m[k].shape)
        opt.v[k] = rng.random(opt.v[k].shape)
    extra = {"norm_mean": rng.standard_normal((3, 2)), "norm_std": rng.random((3, 2))}
    p1, p2 = tmp_path / "a.ifck", tmp_path / "b.ifck"
    save_checkpoint(net, opt, 42, p1, extra)
    ck = load_checkpoint(p1, expect=TINY)
    assert ck.step == 42 and ck.optimizer_state.step == 17
    assert ck.net.config == TINY
    for k in net.params:
        assert np.array_equal(ck.net.params[k].data, net.params[k].data)
        assert np.array_equal(ck.optimizer_state.m[k], opt.m[k])
        assert np.array_equal(ck.optimizer_state.v[k], opt.v[k])
    for k in extra:
        assert np.array_equal(ck.extra[k], extra[k])
    save_checkpoint(ck.net, ck.optimizer_state, ck.step, p2, ck.extra)
    assert p1.read_bytes() == p2.read_bytes()
    zt, zc = latents(TINY, 4, rng)
    assert np.array_equal(ck.net(zt, 0.6, zc), net(zt, 0.6, zc))
    assert not (tmp_path / "a.ifck.tmp").exists()


def test_checkpoint_without_optimizer(tmp_path):
    net = randomized(TINY)
    save_checkpoint(net, None, 0, tmp_path / "c.ifck")
    assert load_checkpoint(tmp_path / "c.ifck").optimizer_state is None


def test_checkpoint_errors(tmp_path):
    net = randomized(TINY)
    path = tmp_path / "c.ifck"
    save_checkpoint(net, adam_init(net.params), 3, path)
    blob = path.read_bytes()

    (tmp_path / "trunc").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "trunc")

    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0x10
    (tmp_path / "flip").write_bytes(bytes(flipped))
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "flip")

    bumped = bytearray(blob)
    bumped[4] = 9
    (tmp_path / "ver").write_bytes(bytes(bumped))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "ver")

    (tmp_path / "junk").write_bytes(b"RIFF\x00\x00\x00\x00")
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "junk")

    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path, expect=NetConfig.desk())
