import numpy as np
import pytest

from deskst import data, models
from deskst.data import Vocabulary
from deskst.models import LossBreakdown, ModelConfig, build, forward, init_store
from deskst.numerics import OptimizerState, adam_step, backward
from deskst.tensor import NumericsError

from util import check_grads


def tiny_dataset(seed=0, n=6, vocab=5):
    # frames_per_token >= 5 keeps 2J+1 <= ceil(T/2), so CTC stays feasible
    return data.generate(
        seed=seed, n_examples=n, vocab_size=vocab, len_range=(2, 3), frames_per_token_range=(5, 6), noise_sigma=0.2
    )


def tiny_config(ds, **over):
    kw = dict(emb_size=6, enc_hidden=5, enc_layers=2, dec_hidden=6, attn_dim=5, pool_schedule=(2, 1), dropout=0.0)
    kw.update(over)
    return ModelConfig.desk(ds.src_vocab, ds.tgt_vocab, **kw)


def first_batch(ds, size=3, ctc=False, pool=2):
    batches, _ = data.batch(ds, size, pool_product=pool, ctc_filter=ctc)
    return batches[0]


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------


def test_build_prefixes_per_topology():
    ds = tiny_dataset()
    cfg = tiny_config(ds, ctc_enabled=True)
    cases = {
        "direct": {"encoder.", "decoder_st.", "ctc_head."},
        "asr": {"encoder.", "decoder_asr.", "ctc_head."},
        "one2many": {"encoder.", "decoder_st.", "decoder_asr.", "ctc_head."},
        "many2one": {"encoder.", "text_encoder.", "decoder_st.", "ctc_head."},
        "tied_cascade": {"encoder.", "decoder_asr.", "decoder_st.", "ctc_head."},
        "tied_triangle": {"encoder.", "decoder_asr.", "decoder_st.", "ctc_head."},
    }
    for topo, expected in cases.items():
        graph = build(cfg, topo)
        prefixes = graph.component_prefixes()
        assert set(prefixes) == expected, topo
        for names in prefixes.values():
            assert names  # non-empty parameter sets
    no_ctc = tiny_config(ds)
    assert set(build(no_ctc, "direct").component_prefixes()) == {"encoder.", "decoder_st."}
    assert set(build(no_ctc, "mt").component_prefixes()) == {"text_encoder.", "decoder_st."}


def test_build_rejects_unknown_topology_and_mt_ctc():
    ds = tiny_dataset()
    with pytest.raises(NumericsError):
        build(tiny_config(ds), "transformer")
    with pytest.raises(NumericsError):
        build(tiny_config(ds, ctc_enabled=True), "mt")


def test_prefix_parameter_sets_are_disjoint():
    ds = tiny_dataset()
    graph = build(tiny_config(ds, ctc_enabled=True), "tied_triangle")
    seen = {}
    for prefix, names in graph.component_prefixes().items():
        for n in names:
            assert n not in seen, f"{n} owned by {prefix} and {seen[n]}"
            seen[n] = prefix


def test_config_validation():
    ds = tiny_dataset()
    with pytest.raises(NumericsError):
        tiny_config(ds, loss_weight=1.5)
    with pytest.raises(NumericsError):
        tiny_config(ds, pool_schedule=(2,))  # wrong length for 2 layers
    with pytest.raises(NumericsError):
        tiny_config(ds, pool_schedule=(0, 1))


# ---------------------------------------------------------------------------
# loss semantics
# ---------------------------------------------------------------------------


def test_zero_parameter_direct_gives_uniform_loss():
    ds = tiny_dataset()
    cfg = tiny_config(ds)
    graph = build(cfg, "direct")
    store = init_store(graph, 0)
    for name in store.names():
        store.set(name, np.zeros(graph.shapes[name]))
    batch = first_batch(ds)
    parts = forward(graph, store, batch)
    steps = int((batch.tgt_lengths() + 1).sum())
    assert parts.st_loss.item() == pytest.approx(steps * np.log(cfg.tgt_vocab_size), rel=1e-9)


def test_direct_combined_equals_parts():
    ds = tiny_dataset()
    graph = build(tiny_config(ds), "direct")
    store = init_store(graph, 1)
    batch = first_batch(ds)
    parts = forward(graph, store, batch)
    assert parts.combined.item() == parts.st_loss.item()
    assert parts.ctc_loss is None

    graph_ctc = build(tiny_config(ds, ctc_enabled=True), "direct")
    store_ctc = init_store(graph_ctc, 1)
    batch_ctc = first_batch(ds, ctc=True)
    parts_ctc = forward(graph_ctc, store_ctc, batch_ctc)
    assert abs(parts_ctc.combined.item() - (parts_ctc.st_loss.item() + parts_ctc.ctc_loss.item())) <= 1e-12


def test_one2many_loss_combination():
    ds = tiny_dataset()
    batch = first_batch(ds, ctc=True)
    for lam, ctc in [(0.5, False), (1.0, False), (0.3, False), (0.5, True)]:
        graph = build(tiny_config(ds, loss_weight=lam, ctc_enabled=ctc), "one2many")
        store = init_store(graph, 2)
        parts = forward(graph, store, batch)
        st, asr = parts.st_loss.item(), parts.asr_loss.item()
        if ctc:
            expected = lam * st + (1 - lam) * (asr + parts.ctc_loss.item())
        else:
            expected = lam * st + (1 - lam) * asr
        assert abs(parts.combined.item() - expected) <= 1e-12
        if lam == 0.5 and not ctc:
            assert abs(parts.combined.item() - (st + asr) / 2) <= 1e-12
        if lam == 1.0:
            assert parts.combined.item() == pytest.approx(st, abs=1e-15)


def test_many2one_speech_mode_matches_direct():
    ds = tiny_dataset()
    batch = first_batch(ds)
    cfg = tiny_config(ds, loss_weight=1.0)
    direct = build(cfg, "direct")
    m2o = build(cfg, "many2one")
    # Identical names initialize identically under the same seed, so the
    # shared encoder/decoder wiring must reproduce the direct loss.
    s_direct = init_store(direct, 3)
    s_m2o = init_store(m2o, 3)
    p_direct = forward(direct, s_direct, batch)
    p_m2o = forward(m2o, s_m2o, batch, mode="speech")
    assert abs(p_m2o.st_loss.item() - p_direct.st_loss.item()) <= 1e-12


def test_many2one_text_mode_matches_standalone_mt():
    ds = tiny_dataset()
    batch = first_batch(ds)
    cfg = tiny_config(ds)
    mt = build(cfg, "mt")
    m2o = build(cfg, "many2one")
    p_mt = forward(mt, init_store(mt, 4), batch)
    p_m2o = forward(m2o, init_store(m2o, 4), batch, mode="text")
    assert abs(p_m2o.mt_loss.item() - p_mt.mt_loss.item()) <= 1e-12
    with pytest.raises(NumericsError):
        forward(m2o, init_store(m2o, 4), batch, mode="audio")


def test_many2one_modes_share_decoder_gradients():
    ds = tiny_dataset()
    batch = first_batch(ds)
    graph = build(tiny_config(ds), "many2one")
    store = init_store(graph, 5)
    g_speech = backward(forward(graph, store, batch, mode="speech").combined, store)
    g_text = backward(forward(graph, store, batch, mode="text").combined, store)
    decoder_names = [n for n in store.names() if n.startswith("decoder_st.")]
    assert decoder_names
    for n in decoder_names:
        assert np.any(g_speech[n] != 0.0), n
        assert np.any(g_text[n] != 0.0), n
    # encoders are exclusive to their modes
    assert all(not np.any(g_text[n]) for n in store.names() if n.startswith("encoder."))
    assert all(not np.any(g_speech[n]) for n in store.names() if n.startswith("text_encoder."))


def test_tied_cascade_has_no_encoder_attention_for_second_decoder():
    ds = tiny_dataset()
    graph = build(tiny_config(ds), "tied_cascade")
    st_names = [n for n in graph.names() if n.startswith("decoder_st.")]
    assert not any(".attn." in n for n in st_names)
    assert any(".attn_dec." in n for n in st_names)
    tri = build(tiny_config(ds), "tied_triangle")
    tri_names = [n for n in tri.names() if n.startswith("decoder_st.")]
    assert any(".attn." in n for n in tri_names) and any(".attn_dec." in n for n in tri_names)


def test_tied_rollout_support_and_triangle_weights():
    ds = tiny_dataset()
    graph = build(tiny_config(ds), "tied_cascade")
    store = init_store(graph, 6)
    batch = first_batch(ds)
    enc = models.run_speech_encoder(graph, store, batch)
    src_vocab = ds.src_vocab
    limits = np.maximum(1, np.ceil(1.5 * batch.src_lengths()).astype(np.int64))
    rollout = models.run_decoder_greedy_rollout(graph, store, "decoder_asr", [("attn", enc)], limits, src_vocab)
    # attention support for the second decoder == greedy output length
    # (steps up to and including EOS, truncated at the per-example limit)
    lengths = rollout.state_mask.sum(axis=1).astype(int)
    for b in range(batch.size):
        live = rollout.state_mask[b] > 0
        expect = int(limits[b])
        for k, tok in enumerate(rollout.tokens[b]):
            if live[k] and tok == src_vocab.eos_id:
                expect = k + 1
                break
        assert lengths[b] == min(expect, int(limits[b]))
    assert rollout.states.shape[1] == int(lengths.max())
    # triangle: both attention distributions are normalized every step
    tri = build(tiny_config(ds), "tied_triangle")
    tstore = init_store(tri, 6)
    enc_t = models.run_speech_encoder(tri, tstore, batch)
    roll_t = models.run_decoder_greedy_rollout(tri, tstore, "decoder_asr", [("attn", enc_t)], limits, src_vocab)
    from deskst.layers import EncoderStates

    dec_mem = EncoderStates(roll_t.states, roll_t.state_mask, roll_t.state_mask.sum(1))
    core = models._DecoderCore(tri, tstore, "decoder_st", [("attn", enc_t), ("attn_dec", dec_mem)], ds.tgt_vocab.size)
    layers_state, feedback = core.initial_state(batch.size)
    probs, ctx, feedback = core.step(np.full(batch.size, ds.tgt_vocab.bos_id), layers_state, feedback, False, None)
    for fb in feedback:  # after one step, feedback == the step's weights
        assert fb.data.sum(axis=-1) == pytest.approx(np.ones(batch.size), abs=1e-12)


def test_tied_loss_combination():
    ds = tiny_dataset()
    batch = first_batch(ds, ctc=True)
    for topo in ("tied_cascade", "tied_triangle"):
        graph = build(tiny_config(ds, loss_weight=0.5, ctc_enabled=True), topo)
        store = init_store(graph, 7)
        parts = forward(graph, store, batch)
        expected = 0.5 * parts.st_loss.item() + 0.5 * (parts.asr_loss.item() + parts.ctc_loss.item())
        assert abs(parts.combined.item() - expected) <= 1e-12


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def test_direct_gradcheck_with_ctc():
    ds = tiny_dataset(vocab=4)
    cfg = ModelConfig.desk(
        ds.src_vocab,
        ds.tgt_vocab,
        emb_size=3,
        enc_hidden=3,
        enc_layers=1,
        dec_hidden=4,
        attn_dim=3,
        pool_schedule=(2,),
        dropout=0.0,
        ctc_enabled=True,
    )
    graph = build(cfg, "direct")
    store = init_store(graph, 8)
    batch = first_batch(ds, size=2, ctc=True)
    check_grads(lambda: forward(graph, store, batch).combined, store)


# ---------------------------------------------------------------------------
# batching equivalence
# ---------------------------------------------------------------------------


def test_padded_batch_loss_equals_sum_of_singles():
    ds = tiny_dataset(n=5)
    cfg = tiny_config(ds, ctc_enabled=True)
    graph = build(cfg, "direct")
    store = init_store(graph, 9)
    batches, _ = data.batch(ds, 5, pool_product=2, ctc_filter=True)
    combined = forward(graph, store, batches[0]).floats()
    singles, _ = data.batch(ds, 1, pool_product=2, ctc_filter=True)
    total = {k: 0.0 for k in combined}
    for b in singles:
        parts = forward(graph, store, b).floats()
        for k in total:
            total[k] += parts[k]
    for k in total:
        assert combined[k] == pytest.approx(total[k], abs=1e-9), k


def test_doubling_pad_length_leaves_loss_unchanged():
    ds = tiny_dataset(n=3)
    graph = build(tiny_config(ds), "direct")
    store = init_store(graph, 10)
    batches, _ = data.batch(ds, 3)
    b = batches[0]
    loss = forward(graph, store, b).combined.item()
    B, T, F = b.frames.shape
    I = b.tgt.shape[1]
    wide = data.Batch(
        ids=b.ids,
        frames=np.concatenate([b.frames, np.zeros((B, T, F))], axis=1),
        frame_mask=np.concatenate([b.frame_mask, np.zeros((B, T))], axis=1),
        src=b.src,
        src_mask=b.src_mask,
        tgt=np.concatenate([b.tgt, np.full((B, I), ds.tgt_vocab.pad_id)], axis=1),
        tgt_mask=np.concatenate([b.tgt_mask, np.zeros((B, I))], axis=1),
    )
    loss_wide = forward(graph, store, wide).combined.item()
    assert loss_wide == pytest.approx(loss, abs=1e-12)


# ---------------------------------------------------------------------------
# growth
# ---------------------------------------------------------------------------


def test_grow_encoder_preserves_existing_layers():
    ds = tiny_dataset()
    cfg = tiny_config(ds, enc_layers=3, pool_schedule=(2, 1, 1))
    graph = build(cfg, "direct", active_enc_layers=2)
    store = init_store(graph, 11)
    old = {n: store[n].data.copy() for n in store.names()}
    assert graph.effective_pools() == (2, 1)
    grown = models.grow_encoder(graph, store, 3)
    assert grown.active_enc_layers == 3
    assert grown.effective_pools() == (2, 1, 1)
    for n, v in old.items():
        assert np.array_equal(store[n].data, v), n
    new_names = set(store.names()) - set(old)
    assert new_names and all(n.startswith("encoder.l2.") for n in new_names)
    with pytest.raises(NumericsError):
        models.grow_encoder(grown, store, 2)
    with pytest.raises(NumericsError):
        models.grow_encoder(grown, store, 4)
    # T' is invariant across growth: pooled lengths match the full stack's
    batch = first_batch(ds)
    enc_small = models.run_speech_encoder(graph, store, batch)
    enc_grown = models.run_speech_encoder(grown, store, batch)
    assert enc_small.states.shape[1] == enc_grown.states.shape[1]


# ---------------------------------------------------------------------------
# trajectory identity
# ---------------------------------------------------------------------------


def test_one2many_lambda1_trains_identically_to_direct():
    ds = tiny_dataset(n=6)
    batches, _ = data.batch(ds, 3)
    cfg = tiny_config(ds, loss_weight=1.0, dropout=0.1)
    seed = 13

    def train(topology):
        graph = build(cfg, topology)
        store = init_store(graph, seed)
        opt = OptimizerState(learning_rate=1e-3)
        rngs = models.dropout_streams(seed)
        for _ in range(2):
            for b in batches:
                parts = forward(graph, store, b, training=True, rngs=rngs)
                adam_step(store, backward(parts.combined, store), opt)
        return store

    s_direct = train("direct")
    s_multi = train("one2many")
    for name in s_direct.names():
        assert np.array_equal(s_direct[name].data, s_multi[name].data), name
