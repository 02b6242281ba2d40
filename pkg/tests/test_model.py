"""Model assembly: config validation, decoders, fusion, full forward modes."""

import numpy as np
import pytest

from capsgaze import layers as L
from capsgaze import model as M
from capsgaze import tensor as T
from capsgaze.errors import ConfigError, ShapeError

from oracles import check_grads, gru_sequence_ref


def tiny_cfg(**kw):
    """Small config that keeps forward passes fast in tests."""
    base = dict(num_capsules=2, num_heads=2, capsule_dim=8, hidden_dim=8,
                seq_len=3, image_size=16, encoder_channels=(4, 4, 8), dropout=0.0)
    base.update(kw)
    return M.ModelConfig(**base)


def make_frames(cfg, batch=2, seed=0):
    return T.randn((batch, cfg.seq_len, 3, cfg.image_size, cfg.image_size), T.RandomSource(seed))


# -- config validation -----------------------------------------------------------


def test_default_config_values():
    cfg = M.ModelConfig()
    assert (cfg.num_capsules, cfg.num_heads, cfg.capsule_dim, cfg.hidden_dim, cfg.seq_len) == (4, 4, 64, 128, 9)
    assert cfg.decoder_mode == "dual"
    assert cfg.use_capsules and cfg.use_attention
    assert cfg.dropout == 0.1
    assert cfg.feature_hw == 8 and cfg.num_locations == 64
    assert cfg.decoder_input_size == 4 * 64


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        M.ModelConfig(capsule_dim=10, num_heads=4)  # not divisible
    with pytest.raises(ConfigError):
        M.ModelConfig(decoder_mode="triple")
    with pytest.raises(ConfigError):
        M.ModelConfig(seq_len=0)
    with pytest.raises(ConfigError):
        M.ModelConfig(image_size=60)
    with pytest.raises(ConfigError):
        M.ModelConfig(dropout=1.0)
    with pytest.raises(ConfigError):
        M.ModelConfig(encoder_channels=(16, 32))
    with pytest.raises(ConfigError):
        M.ModelConfig(attention_scale_mode="fancy")
    with pytest.raises(ConfigError):
        M.ModelConfig(split_capsules=True, decoder_mode="single")
    with pytest.raises(ConfigError):
        M.ModelConfig(split_capsules=True, num_capsules=3)


def test_token_count_reflects_capsule_toggle():
    assert tiny_cfg(use_capsules=True).num_tokens == 2
    assert tiny_cfg(use_capsules=False).num_tokens == 4  # 16/8=2, 2*2 locations


# -- decode ------------------------------------------------------------------------


def test_decode_zero_gru_outputs_head_bias():
    rng = T.RandomSource(0)
    p = M.init_decoder(6, 4, rng)
    for f in M._GRU_FIELDS:
        getattr(p.gru, f).data[...] = 0.0
    p.head.bias = T.Tensor([0.3, -0.7], requires_grad=True)
    caps = T.randn((5, 3, 2, 3), rng)
    out = M.decode(caps, p)
    # zero gates: z=0.5 but candidate=0 and h0=0, so h stays 0 forever
    assert np.allclose(out.numpy(), [[0.3, -0.7]] * 5, atol=1e-6)


def test_decode_t1_equals_single_cell():
    rng = T.RandomSource(1)
    p = M.init_decoder(8, 5, rng)
    caps = T.randn((2, 1, 2, 4), rng)
    out = M.decode(caps, p)
    x = caps.reshape((2, 8))
    h = L.gru_cell(x, T.zeros((2, 5)), p.gru)
    want = L.linear(h, p.head)
    assert np.allclose(out.numpy(), want.numpy(), atol=1e-7)


def test_decode_matches_unrolled_reference():
    rng = np.random.default_rng(2)
    hidden, width = 4, 6
    p = M.DecoderParams(
        gru=L.GRUParams(**{f: T.Tensor(rng.standard_normal(
            (hidden, width) if f.startswith("W") else (hidden, hidden) if f.startswith("U") else hidden
        ) * 0.4, dtype=np.float64) for f in M._GRU_FIELDS}),
        head=L.LinearParams(weight=T.Tensor(rng.standard_normal((2, hidden)), dtype=np.float64),
                            bias=T.Tensor(rng.standard_normal(2), dtype=np.float64)),
    )
    caps = rng.standard_normal((2, 3, 2, 3))
    out = M.decode(T.Tensor(caps, dtype=np.float64), p)
    pn = {f: getattr(p.gru, f).numpy() for f in M._GRU_FIELDS}
    for b in range(2):
        h = gru_sequence_ref(caps[b].reshape(3, 6), pn)
        want = p.head.weight.numpy() @ h + p.head.bias.numpy()
        assert np.allclose(out.numpy()[b], want, atol=1e-6)


def test_decode_shape_errors():
    p = M.init_decoder(6, 4, T.RandomSource(0))
    with pytest.raises(ShapeError):
        M.decode(T.zeros((2, 3, 2, 4)), p)  # 2*4 != 6
    with pytest.raises(ShapeError):
        M.decode(T.zeros((2, 3, 6)), p)


# -- fuse --------------------------------------------------------------------------


def test_fuse_zero_weight_gives_bias():
    p = M.FusionParams(lin=L.LinearParams(weight=T.zeros((2, 4)), bias=T.Tensor([1.0, 2.0])))
    out = M.fuse(T.randn((3, 2), T.RandomSource(0)), T.randn((3, 2), T.RandomSource(1)), p)
    assert np.allclose(out.numpy(), [[1.0, 2.0]] * 3)


def test_fuse_selection_matrix_returns_first_branch():
    w = np.zeros((2, 4), dtype=np.float32)
    w[0, 0] = w[1, 1] = 1.0
    p = M.FusionParams(lin=L.LinearParams(weight=T.Tensor(w), bias=T.zeros((2,))))
    y1 = T.randn((4, 2), T.RandomSource(2))
    y2 = T.randn((4, 2), T.RandomSource(3))
    assert np.allclose(M.fuse(y1, y2, p).numpy(), y1.numpy(), atol=1e-7)


def test_fuse_matches_hand_matvec():
    rng = np.random.default_rng(4)
    w = rng.standard_normal((2, 4))
    b = rng.standard_normal(2)
    y1 = rng.standard_normal((3, 2))
    y2 = rng.standard_normal((3, 2))
    p = M.FusionParams(lin=L.LinearParams(weight=T.Tensor(w, dtype=np.float64),
                                          bias=T.Tensor(b, dtype=np.float64)))
    got = M.fuse(T.Tensor(y1, dtype=np.float64), T.Tensor(y2, dtype=np.float64), p).numpy()
    want = np.concatenate([y1, y2], axis=1) @ w.T + b
    assert np.allclose(got, want, atol=1e-12)


def test_fuse_shape_errors():
    p = M.FusionParams(lin=L.init_linear(4, 2, T.RandomSource(0)))
    with pytest.raises(ShapeError):
        M.fuse(T.zeros((2, 2)), T.zeros((3, 2)), p)
    with pytest.raises(ShapeError):
        M.fuse(T.zeros((2, 3)), T.zeros((2, 3)), p)


# -- full forward -------------------------------------------------------------------


def test_forward_output_shape_and_weights():
    cfg = tiny_cfg()
    params = M.init_model(cfg, T.RandomSource(0))
    pred, aw = M.model_forward(make_frames(cfg), params, cfg)
    assert pred.shape == (2, 2)
    assert aw.A.shape == (2, cfg.num_heads, 6, 6)  # T*K = 3*2
    assert aw.P.shape == (2, 3, 2, cfg.num_locations)
    assert np.all(np.isfinite(pred.numpy()))


def test_forward_eval_deterministic():
    cfg = tiny_cfg(dropout=0.3)
    params = M.init_model(cfg, T.RandomSource(0))
    frames = make_frames(cfg)
    a, _ = M.model_forward(frames, params, cfg, training=False)
    b, _ = M.model_forward(frames, params, cfg, training=False)
    assert np.array_equal(a.numpy(), b.numpy())  # bit identical


def test_forward_batch_element_independence():
    cfg = tiny_cfg()
    params = M.init_model(cfg, T.RandomSource(1))
    frames = make_frames(cfg, batch=3, seed=5)
    full, _ = M.model_forward(frames, params, cfg)
    swapped = frames.numpy().copy()
    swapped[0] = np.random.default_rng(9).standard_normal(swapped[0].shape)
    part, _ = M.model_forward(T.Tensor(swapped), params, cfg)
    assert np.array_equal(full.numpy()[1:], part.numpy()[1:])


def test_forward_single_mode():
    cfg = tiny_cfg(decoder_mode="single")
    params = M.init_model(cfg, T.RandomSource(0))
    assert params.dec2 is None and params.fusion is None
    pred, _ = M.model_forward(make_frames(cfg), params, cfg)
    assert pred.shape == (2, 2)


def test_forward_dual_shared_branches_equal():
    cfg = tiny_cfg(decoder_mode="dual_shared")
    params = M.init_model(cfg, T.RandomSource(0))
    assert params.dec2 is params.dec1
    frames = make_frames(cfg)
    pred, _ = M.model_forward(frames, params, cfg)
    # fused output must equal fuse(y, y) with the single branch value
    fm_pred = pred.numpy()
    cfg_dual = tiny_cfg(decoder_mode="dual")
    # compute the branch by hand through the shared path
    tokens = _tokens_for(frames, params, cfg)
    y = M.decode(tokens, params.dec1)
    want = M.fuse(y, y, params.fusion)
    assert np.array_equal(fm_pred, want.numpy())


def _tokens_for(frames, params, cfg):
    from capsgaze import capsules as Cap
    from capsgaze import encoder as E

    b, t = frames.shape[:2]
    fm = E.encode(frames.reshape((b * t, 3, cfg.image_size, cfg.image_size)), params.encoder, False)
    cp = Cap.CapsuleParams(phi=params.phi, queries=params.queries)
    tokens, _ = Cap.form_capsules(fm, cp, seq_len=t)
    if cfg.use_attention:
        tokens, _ = Cap.route(tokens, params.attention)
    return tokens


def test_forward_dual_decoders_independent():
    cfg = tiny_cfg(decoder_mode="dual")
    params = M.init_model(cfg, T.RandomSource(0))
    assert params.dec2 is not params.dec1
    before = params.dec2.gru.W_z.numpy().copy()
    params.dec1.gru.W_z.data[...] += 1.0
    assert np.array_equal(params.dec2.gru.W_z.numpy(), before)


def test_forward_component_toggles():
    for use_caps, use_attn in [(True, False), (False, True), (False, False)]:
        cfg = tiny_cfg(use_capsules=use_caps, use_attention=use_attn)
        params = M.init_model(cfg, T.RandomSource(0))
        if not use_caps:
            assert params.queries is None
        if not use_attn:
            assert params.attention is None
        pred, aw = M.model_forward(make_frames(cfg), params, cfg)
        assert pred.shape == (2, 2)
        assert (aw.P is None) == (not use_caps)
        assert (aw.A is None) == (not use_attn)


def test_forward_no_caps_no_attn_is_plain_pipeline():
    # ablation wiring: encoder -> projected locations -> decoders
    cfg = tiny_cfg(use_capsules=False, use_attention=False)
    params = M.init_model(cfg, T.RandomSource(3))
    frames = make_frames(cfg, seed=4)
    pred, _ = M.model_forward(frames, params, cfg)
    from capsgaze import capsules as Cap
    from capsgaze import encoder as E

    fm = E.encode(frames.reshape((6, 3, 16, 16)), params.encoder, False)
    locs = Cap.project_locations(fm, params.phi)
    tokens = locs.reshape((2, 3, 4, 8))
    want = M.fuse(M.decode(tokens, params.dec1), M.decode(tokens, params.dec2), params.fusion)
    assert np.array_equal(pred.numpy(), want.numpy())


def test_forward_split_capsules_partitions_tokens():
    cfg = tiny_cfg(split_capsules=True, num_capsules=4)
    params = M.init_model(cfg, T.RandomSource(0))
    assert params.dec1.gru.input_size == 2 * cfg.capsule_dim
    frames = make_frames(cfg)
    pred, _ = M.model_forward(frames, params, cfg)
    tokens = _tokens_for(frames, params, cfg)
    y1 = M.decode(T.slice_axis(tokens, 2, 0, 2), params.dec1)
    y2 = M.decode(T.slice_axis(tokens, 2, 2, 4), params.dec2)
    want = M.fuse(y1, y2, params.fusion)
    assert np.array_equal(pred.numpy(), want.numpy())


def test_forward_gradients_reach_all_parameters():
    cfg = tiny_cfg()
    params = M.init_model(cfg, T.RandomSource(0))
    pred, _ = M.model_forward(make_frames(cfg), params, cfg, training=True, rng=T.RandomSource(1))
    (pred * pred).sum().backward()
    named = M.named_parameters(params, cfg)
    nonzero = [n for n, t in named.items() if t.grad is not None and np.linalg.norm(t.grad) > 0]
    assert len(nonzero) >= 0.95 * len(named), f"only {len(nonzero)}/{len(named)} got gradient"


def test_forward_frozen_encoder_gets_no_gradient():
    cfg = tiny_cfg(frozen_encoder=True)
    params = M.init_model(cfg, T.RandomSource(0))
    pred, _ = M.model_forward(make_frames(cfg), params, cfg, training=True, rng=T.RandomSource(1))
    (pred * pred).sum().backward()
    for name, tns in M.named_parameters(params, cfg).items():
        if name.startswith("encoder."):
            assert tns.grad is None, f"{name} should be frozen"
        else:
            assert tns.grad is not None, f"{name} should train"


def test_forward_shape_errors_are_stage_labeled():
    cfg = tiny_cfg()
    params = M.init_model(cfg, T.RandomSource(0))
    with pytest.raises(ShapeError):
        M.model_forward(T.zeros((2, 3, 3, 16)), params, cfg)
    with pytest.raises(ShapeError, match="seq_len"):
        M.model_forward(T.zeros((2, 5, 3, 16, 16)), params, cfg)
    # inject an inconsistency inside the decoder stage and check the label
    params.dec1.gru = L.init_gru(5, cfg.hidden_dim, T.RandomSource(0))
    with pytest.raises(ShapeError, match=r"\[decoder\]"):
        M.model_forward(make_frames(cfg), params, cfg)


def test_forward_train_vs_eval_dropout():
    cfg = tiny_cfg(dropout=0.5)
    params = M.init_model(cfg, T.RandomSource(0))
    frames = make_frames(cfg)
    ev, _ = M.model_forward(frames, params, cfg, training=False)
    tr1, _ = M.model_forward(frames, params, cfg, training=True, rng=T.RandomSource(1))
    tr2, _ = M.model_forward(frames, params, cfg, training=True, rng=T.RandomSource(1))
    tr3, _ = M.model_forward(frames, params, cfg, training=True, rng=T.RandomSource(2))
    assert not np.array_equal(ev.numpy(), tr1.numpy())
    assert np.array_equal(tr1.numpy(), tr2.numpy())  # same rng, same mask
    assert not np.array_equal(tr1.numpy(), tr3.numpy())


def test_named_parameters_structure():
    cfg = tiny_cfg()
    params = M.init_model(cfg, T.RandomSource(0))
    names = M.named_parameters(params, cfg)
    # 12 encoder + 2 phi + 1 queries + 8 attention + 11 per decoder x2 + 2 fusion
    assert len(names) == 12 + 2 + 1 + 8 + 22 + 2
    shared = M.named_parameters(M.init_model(tiny_cfg(decoder_mode="dual_shared"), T.RandomSource(0)),
                                tiny_cfg(decoder_mode="dual_shared"))
    assert not any(n.startswith("dec2.") for n in shared)
    single = M.named_parameters(M.init_model(tiny_cfg(decoder_mode="single"), T.RandomSource(0)),
                                tiny_cfg(decoder_mode="single"))
    assert not any(n.startswith(("dec2.", "fusion")) for n in single)
    assert len(M.named_buffers(params)) == 6


def test_init_model_component_streams_stable():
    # toggling attention must not change decoder initialization
    a = M.init_model(tiny_cfg(use_attention=True), T.RandomSource(7))
    b = M.init_model(tiny_cfg(use_attention=False), T.RandomSource(7))
    assert np.array_equal(a.dec1.gru.W_z.numpy(), b.dec1.gru.W_z.numpy())
    assert np.array_equal(a.encoder.blocks[0].weight.numpy(), b.encoder.blocks[0].weight.numpy())


@pytest.mark.parametrize("seed", range(3))
def test_forward_full_model_grads_fd(seed):
    # finite differences through the entire model on a micro config
    cfg = M.ModelConfig(num_capsules=2, num_heads=1, capsule_dim=4, hidden_dim=4,
                        seq_len=2, image_size=8, encoder_channels=(2, 2, 3), dropout=0.0)
    params = M.init_model(cfg, T.RandomSource(seed), dtype=np.float64)
    frames_np = np.random.default_rng(seed).standard_normal((1, 2, 3, 8, 8))
    named = M.named_parameters(params, cfg)
    names = sorted(named)
    arrays = [named[n].numpy().astype(np.float64) for n in names]

    def loss(ts):
        p2 = M.init_model(cfg, T.RandomSource(seed), dtype=np.float64)
        for nm, tens in zip(names, ts):
            _assign(p2, nm, tens)
        pred, _ = M.model_forward(T.Tensor(frames_np, dtype=np.float64), p2, cfg, training=False)
        return (pred ** 2.0).sum()

    sample_rng = np.random.default_rng(seed)
    check_grads(loss, arrays, sample=4, rng=sample_rng)


def _assign(params, name, tensor):
    """Rebind one named parameter tensor inside a GazeParams tree."""
    parts = name.split(".")
    if parts[0] == "encoder":
        blk = params.encoder.blocks[int(parts[1][len("block"):])]
        if parts[2] in ("weight", "bias"):
            setattr(blk, parts[2], tensor)
        else:
            setattr(blk.norm, parts[2], tensor)
    elif parts[0] == "caps":
        if parts[1] == "queries":
            params.queries = tensor
        else:
            setattr(params.phi, parts[2], tensor)
    elif parts[0] == "attn":
        setattr(getattr(params.attention, parts[1]), parts[2], tensor)
    elif parts[0] in ("dec1", "dec2"):
        dec = params.dec1 if parts[0] == "dec1" else params.dec2
        if parts[1] == "gru":
            setattr(dec.gru, parts[2], tensor)
        else:
            setattr(dec.head, parts[2], tensor)
    elif parts[0] == "fusion":
        setattr(params.fusion.lin, parts[1], tensor)
    else:
        raise KeyError(name)
