"""Fused-sequence LM: layout, causality, losses, LoRA, head, checkpoints."""

import numpy as np
import pytest

from speechsel.errors import (
    ContextOverflow,
    DimensionMismatch,
    EmptyText,
    MissingHead,
    NoAudioPositions,
    UnknownTarget,
)
from speechsel.model import (
    KIND_AUDIO,
    KIND_CLS,
    KIND_SEP,
    KIND_TEXT,
    AudioProjection,
    Batch,
    ClassifierHead,
    FusedSequence,
    LmConfig,
    attach_lora,
    build_fused_sequence,
    classification_loss,
    classify,
    clm_loss,
    default_lora_targets,
    extend_audio_vocab,
    forward,
    init_head,
    init_params,
    init_projection,
    load_checkpoint,
    merge_lora,
    pad_batch,
    project_continuous_audio,
    save_checkpoint,
)
from speechsel.numerics import grad_check, log_softmax

CFG = LmConfig(d_model=32, n_layers=2, n_heads=2, context=64,
               n_text=30, n_audio=12, seed=0)


def make_seqs(cfg, n, seed=0, min_audio=1, max_audio=6, label_classes=0):
    rng = np.random.default_rng(seed)
    seqs = []
    for i in range(n):
        text = rng.integers(0, cfg.n_text, size=rng.integers(2, 8))
        m = rng.integers(min_audio, max_audio + 1)
        audio = cfg.n_text + rng.integers(0, cfg.n_audio, size=m)
        label = int(rng.integers(0, label_classes)) if label_classes else None
        seqs.append(build_fused_sequence(text, audio, cfg, label=label))
    return seqs


# --- config and layout ------------------------------------------------------------


def test_config_layout_and_validation():
    cfg = LmConfig(d_model=16, n_layers=1, n_heads=2, context=32,
                   n_text=10, n_audio=5)
    assert cfg.sep_id == 15 and cfg.cls_id == 16 and cfg.pad_id == 17
    assert cfg.vocab_size == 18
    with pytest.raises(ValueError):
        LmConfig(d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        LmConfig(n_text=0)


def test_fused_layout_example():
    cfg = LmConfig(d_model=16, n_layers=1, n_heads=2, context=32,
                   n_text=10, n_audio=5)
    s = build_fused_sequence([3, 4], [12], cfg)
    assert list(s.ids) == [3, 4, cfg.sep_id, 12, cfg.cls_id]
    assert list(s.kinds) == [KIND_TEXT, KIND_TEXT, KIND_SEP, KIND_AUDIO, KIND_CLS]
    assert len(s) == 5


def test_fused_empty_audio_allowed():
    s = build_fused_sequence([1, 2], [], CFG)
    assert list(s.ids) == [1, 2, CFG.sep_id, CFG.cls_id]
    assert s.n_audio_positions == 0


def test_fused_empty_text_rejected():
    with pytest.raises(EmptyText):
        build_fused_sequence([], [CFG.n_text], CFG)


def test_fused_truncates_audio_tail_first_then_text():
    cfg = LmConfig(d_model=16, n_layers=1, n_heads=2, context=10,
                   n_text=10, n_audio=5)
    # room for 8 body tokens: text 5 + audio 6 -> audio cut to 3
    s = build_fused_sequence(list(range(5)), [10, 11, 12, 13, 14, 10], cfg)
    assert len(s) == 10
    assert list(s.ids[:5]) == [0, 1, 2, 3, 4]
    assert list(s.ids[6:9]) == [10, 11, 12]  # right-truncated audio
    # text longer than the body: audio dropped entirely, text tail cut
    s2 = build_fused_sequence(list(range(9)), [10, 11], cfg)
    assert len(s2) == 10
    assert s2.n_audio_positions == 0
    assert list(s2.ids[:8]) == list(range(8))


# --- forward ----------------------------------------------------------------------


def test_forward_shapes_and_determinism():
    params = init_params(CFG)
    seqs = make_seqs(CFG, 5, seed=1)
    batch = pad_batch(seqs, CFG)
    logits1, h1, _ = forward(batch, params, CFG)
    logits2, h2, _ = forward(batch, params, CFG)
    assert logits1.shape == batch.ids.shape + (CFG.vocab_size,)
    assert h1.shape == batch.ids.shape + (CFG.d_model,)
    assert np.array_equal(logits1, logits2)


def test_forward_identical_sequences_identical_rows():
    params = init_params(CFG)
    s = make_seqs(CFG, 1, seed=2)[0]
    batch = pad_batch([s, s, s], CFG)
    logits, _, _ = forward(batch, params, CFG)
    assert np.array_equal(logits[0], logits[1])
    assert np.array_equal(logits[1], logits[2])


def _causality_check(params, adapters):
    s = make_seqs(CFG, 1, seed=3, min_audio=4)[0]
    ids = s.ids.copy()
    t = len(s) - 3  # perturb a position near the tail
    batch_a = pad_batch([s], CFG)
    logits_a, _, _ = forward(batch_a, params, CFG, adapters)
    ids[t + 1] = (ids[t + 1] - CFG.n_text + 1) % CFG.n_audio + CFG.n_text
    s2 = FusedSequence(ids=ids, kinds=s.kinds)
    logits_b, _, _ = forward(pad_batch([s2], CFG), params, CFG, adapters)
    assert np.array_equal(logits_a[0, :t + 1], logits_b[0, :t + 1])
    assert not np.array_equal(logits_a[0, t + 1], logits_b[0, t + 1])


def test_forward_causal_without_adapters():
    _causality_check(init_params(CFG), None)


def test_forward_causal_with_adapters():
    params = init_params(CFG)
    adapters = attach_lora(params, default_lora_targets(CFG), seed=5)
    # nonzero B so the adapters actually contribute
    for ad in adapters.values():
        ad.b[:] = np.random.default_rng(6).normal(0.0, 0.05, ad.b.shape)
    _causality_check(params, adapters)


def test_forward_context_overflow():
    cfg = LmConfig(d_model=16, n_layers=1, n_heads=2, context=8,
                   n_text=10, n_audio=2)
    ids = np.zeros((1, 9), dtype=np.int64)
    kinds = np.zeros(9, dtype=np.int64)
    with pytest.raises(ContextOverflow):
        pad_batch([FusedSequence(
            ids=np.array([0, cfg.sep_id] + [10] * 6 + [cfg.cls_id]),
            kinds=np.array([0, 1] + [2] * 6 + [3]))], cfg)


# --- CLM loss ---------------------------------------------------------------------


def test_zeroed_head_gives_uniform_softmax_and_ln_vocab_loss():
    params = init_params(CFG)
    params.params["lm_head"][...] = 0.0
    seqs = make_seqs(CFG, 4, seed=7)
    batch = pad_batch(seqs, CFG)
    logits, _, _ = forward(batch, params, CFG)
    assert np.array_equal(logits, np.zeros_like(logits))
    loss, _ = clm_loss(batch, params, CFG)
    assert loss == pytest.approx(np.log(CFG.vocab_size), abs=1e-12)


def test_clm_loss_matches_manual_masked_cross_entropy():
    params = init_params(CFG)
    seqs = make_seqs(CFG, 6, seed=8)
    batch = pad_batch(seqs, CFG)
    loss, _ = clm_loss(batch, params, CFG)
    # independent recount straight from the forward logits
    logits, _, _ = forward(batch, params, CFG)
    lp = log_softmax(logits.astype(np.float64))
    total, count = 0.0, 0
    for i, s in enumerate(seqs):
        for t in range(len(s)):
            if s.kinds[t] == KIND_AUDIO:
                total -= lp[i, t - 1, s.ids[t]]
                count += 1
    assert loss == pytest.approx(total / count, rel=1e-12)


def test_clm_loss_single_audio_token():
    params = init_params(CFG)
    s = build_fused_sequence([1, 2, 3], [CFG.n_text + 4], CFG)
    batch = pad_batch([s], CFG)
    loss, _ = clm_loss(batch, params, CFG)
    logits, _, _ = forward(batch, params, CFG)
    lp = log_softmax(logits[0, 3].astype(np.float64))  # SEP at position 3
    assert loss == pytest.approx(-lp[CFG.n_text + 4], rel=1e-12)


def test_clm_loss_requires_audio_positions():
    params = init_params(CFG)
    s = build_fused_sequence([1, 2], [], CFG)
    with pytest.raises(NoAudioPositions):
        clm_loss(pad_batch([s], CFG), params, CFG)


def test_clm_loss_ignores_text_targets():
    # two batches: same prefix ids, but the fused layout marks only audio
    # positions as targets, so editing what a text position would predict
    # (its successor's presence in the mask) never enters the loss
    params = init_params(CFG)
    seqs = make_seqs(CFG, 3, seed=9)
    batch = pad_batch(seqs, CFG)
    loss, _ = clm_loss(batch, params, CFG)
    mask = batch.audio_mask
    assert mask.sum() == sum(s.n_audio_positions for s in seqs)
    # no text/sep/cls position is a target
    for i, s in enumerate(seqs):
        for t in range(len(s)):
            if s.kinds[t] != KIND_AUDIO:
                assert not mask[i, t]


# --- gradient checks --------------------------------------------------------------


def _f64_params(cfg):
    return init_params(cfg, dtype=np.float64)


def _warm_residual_writes(params, cfg, seed):
    # wo and fc2 start at zero, which makes their true gradients tiny
    # (finite differences drown in rounding noise) and blocks any gradient
    # from reaching wq/wk/wv/fc1 at all; small random values put every
    # tensor's gradient on a checkable scale
    rng = np.random.default_rng(seed)
    for l in range(cfg.n_layers):
        for name in (f"blocks.{l}.wo", f"blocks.{l}.fc2"):
            w = params.params[name]
            w[:] = rng.normal(0.0, 0.05, w.shape)


def test_grad_check_stage2_audio_embeddings():
    cfg = LmConfig(d_model=16, n_layers=2, n_heads=2, context=32,
                   n_text=12, n_audio=6, seed=1)
    params = _f64_params(cfg)
    _warm_residual_writes(params, cfg, seed=21)
    seqs = make_seqs(cfg, 3, seed=10)
    batch = pad_batch(seqs, cfg)
    params.freeze_all()
    params.set_trainable("emb_audio", True)
    err = grad_check(
        lambda store: clm_loss(batch, store, cfg, want={"emb_audio"}),
        params, eps=1e-5)
    assert err <= 1e-4, err


def test_grad_check_full_backward():
    cfg = LmConfig(d_model=8, n_layers=1, n_heads=2, context=24,
                   n_text=6, n_audio=4, seed=2)
    params = _f64_params(cfg)
    _warm_residual_writes(params, cfg, seed=22)
    seqs = make_seqs(cfg, 2, seed=11)
    batch = pad_batch(seqs, cfg)
    names = set(params.names())
    # floor sits above the FD noise level (~ulp(loss)/eps = 5e-11) so
    # coordinates with genuinely tiny gradients cannot dominate the metric
    err = grad_check(
        lambda store: clm_loss(batch, store, cfg, want=names),
        params, eps=1e-5, floor=1e-6)
    assert err <= 1e-4, err


def test_grad_check_stage3_lora_and_head():
    cfg = LmConfig(d_model=16, n_layers=2, n_heads=2, context=32,
                   n_text=12, n_audio=6, seed=3)
    params = _f64_params(cfg)
    _warm_residual_writes(params, cfg, seed=23)
    adapters = attach_lora(params, default_lora_targets(cfg), rank=2,
                           alpha=4.0, seed=4, dtype=np.float64)
    # nonzero B so B's gradient pathway is exercised away from the origin
    rng = np.random.default_rng(12)
    for ad in adapters.values():
        ad.b[:] = rng.normal(0.0, 0.05, ad.b.shape)
    head = init_head(cfg, 3, seed=5, dtype=np.float64)
    seqs = make_seqs(cfg, 3, seed=13, label_classes=3)
    batch = pad_batch(seqs, cfg)

    from speechsel.training import tuning_store
    tune = tuning_store(adapters, head)
    want = set(tune.names())
    err = grad_check(
        lambda store: classification_loss(batch, params, cfg, adapters, head,
                                          want=want),
        tune, eps=1e-5, floor=1e-6)
    assert err <= 1e-4, err


# --- LoRA -------------------------------------------------------------------------


def test_lora_zero_init_is_exact_identity():
    params = init_params(CFG)
    batch = pad_batch(make_seqs(CFG, 4, seed=14), CFG)
    base_logits, _, _ = forward(batch, params, CFG)
    adapters = attach_lora(params, default_lora_targets(CFG), seed=6)
    lora_logits, _, _ = forward(batch, params, CFG, adapters)
    assert np.array_equal(base_logits, lora_logits)


def test_lora_param_count():
    params = init_params(CFG)
    adapters = attach_lora(params, ["blocks.0.wq"], rank=8)
    d = CFG.d_model
    assert adapters["blocks.0.wq"].param_count() == 8 * (d + d)


def test_lora_merge_matches_adapter_forward():
    params = init_params(CFG)
    adapters = attach_lora(params, default_lora_targets(CFG), seed=7)
    rng = np.random.default_rng(15)
    for ad in adapters.values():
        ad.b[:] = rng.normal(0.0, 0.1, ad.b.shape)
    batch = pad_batch(make_seqs(CFG, 4, seed=16), CFG)
    with_adapters, _, _ = forward(batch, params, CFG, adapters)
    merged = merge_lora(params, adapters)
    merged_logits, _, _ = forward(batch, merged, CFG)
    assert np.allclose(with_adapters, merged_logits, atol=1e-5)


def test_lora_unknown_target():
    params = init_params(CFG)
    with pytest.raises(UnknownTarget):
        attach_lora(params, ["blocks.9.wq"])


# --- classification ---------------------------------------------------------------


def test_classify_valid_distribution():
    params = init_params(CFG)
    head = init_head(CFG, 6, seed=8)
    batch = pad_batch(make_seqs(CFG, 5, seed=17), CFG)
    probs = classify(batch, params, CFG, None, head)
    assert probs.shape == (5, 6)
    assert (probs >= 0).all()
    assert np.abs(probs.sum(axis=1) - 1.0).max() <= 1e-6


def test_classify_zero_head_uniform_and_two_class():
    params = init_params(CFG)
    head = ClassifierHead(weight=np.zeros((2, CFG.d_model), dtype=np.float32),
                          bias=np.zeros(2, dtype=np.float32))
    batch = pad_batch(make_seqs(CFG, 3, seed=18), CFG)
    probs = classify(batch, params, CFG, None, head)
    assert probs.shape == (3, 2)
    assert np.allclose(probs, 0.5)


def test_classify_missing_head():
    params = init_params(CFG)
    batch = pad_batch(make_seqs(CFG, 2, seed=19), CFG)
    with pytest.raises(MissingHead):
        classify(batch, params, CFG, None, None)


# --- vocabulary extension ----------------------------------------------------------


def test_extend_audio_vocab_preserves_text_and_specials():
    cfg = LmConfig(d_model=16, n_layers=1, n_heads=2, context=32,
                   n_text=10, n_audio=0, seed=4)
    params = init_params(cfg)
    new_params, new_cfg = extend_audio_vocab(params, cfg, n_audio=6, seed=9)
    assert new_cfg.n_audio == 6
    assert new_cfg.sep_id == cfg.sep_id + 6
    assert np.array_equal(params["emb_text"], new_params["emb_text"])
    for l in range(cfg.n_layers):
        for w in ("wq", "wk", "wv", "wo", "fc1", "fc2"):
            assert np.array_equal(params[f"blocks.{l}.{w}"],
                                  new_params[f"blocks.{l}.{w}"])
    old_head, new_head = params["lm_head"], new_params["lm_head"]
    assert np.array_equal(new_head[:10], old_head[:10])        # text rows
    assert np.array_equal(new_head[16:], old_head[10:])        # special rows
    mean_emb = params["emb_text"][:10].mean(axis=0)
    spread = np.abs(new_params["emb_audio"] - mean_emb)
    assert spread.max() < 0.2  # mean plus small noise
    assert spread.max() > 0.0  # but not exactly the mean


def test_extend_audio_vocab_guards():
    params = init_params(CFG)
    with pytest.raises(ValueError):
        extend_audio_vocab(params, CFG, 4)  # already has audio vocab


# --- continuous projection ----------------------------------------------------------


def test_projection_zero_input_gives_bias():
    proj = init_projection(5, CFG, seed=10)
    proj.bias[:] = np.arange(CFG.d_model, dtype=np.float32)
    out = project_continuous_audio(np.zeros(5), proj)
    assert np.array_equal(out, proj.bias)
    assert out.shape == (CFG.d_model,)


def test_projection_identity_passthrough():
    proj = AudioProjection(weight=np.eye(CFG.d_model, dtype=np.float64),
                           bias=np.ones(CFG.d_model, dtype=np.float64))
    x = np.arange(CFG.d_model, dtype=np.float64)
    assert np.array_equal(project_continuous_audio(x, proj), x + 1.0)


def test_projection_dimension_mismatch():
    proj = init_projection(5, CFG)
    with pytest.raises(DimensionMismatch):
        project_continuous_audio(np.zeros(6), proj)


# --- checkpoints -------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    params = init_params(CFG)
    params.freeze_all()
    params.set_trainable("emb_audio", True)
    adapters = attach_lora(params, default_lora_targets(CFG), seed=11)
    rng = np.random.default_rng(20)
    for ad in adapters.values():
        ad.b[:] = rng.normal(0.0, 0.1, ad.b.shape)
    head = init_head(CFG, 2, seed=12)
    p = tmp_path / "model.sptk"
    save_checkpoint(p, params, CFG, adapters, head)
    params2, cfg2, adapters2, head2 = load_checkpoint(p)
    assert cfg2 == CFG
    for name in params.names():
        assert np.array_equal(params[name], params2[name]), name
        assert params.is_trainable(name) == params2.is_trainable(name), name
    for t in adapters:
        assert np.array_equal(adapters[t].a, adapters2[t].a)
        assert np.array_equal(adapters[t].b, adapters2[t].b)
        assert adapters2[t].rank == adapters[t].rank
        assert adapters2[t].alpha == adapters[t].alpha
    assert np.array_equal(head.weight, head2.weight)
    assert np.array_equal(head.bias, head2.bias)
    # a second save of the loaded state is byte-identical
    p2 = tmp_path / "again.sptk"
    save_checkpoint(p2, params2, cfg2, adapters2, head2)
    assert p.read_bytes() == p2.read_bytes()


def test_checkpoint_without_adapters_or_head(tmp_path):
    params = init_params(CFG)
    p = tmp_path / "bare.sptk"
    save_checkpoint(p, params, CFG)
    params2, cfg2, adapters2, head2 = load_checkpoint(p)
    assert adapters2 is None and head2 is None
    assert np.array_equal(params["lm_head"], params2["lm_head"])


def test_checkpoint_rejects_bad_magic(tmp_path):
    p = tmp_path / "junk.sptk"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError):
        load_checkpoint(p)
