"""Greedy and beam search over trained graphs, plus the ASR->MT cascade.

Decoding runs without gradient recording. Ties are broken toward the lowest
token id so zero-parameter models decode deterministically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models
from .data import Batch, Vocabulary
from .layers import EncoderStates
from .models import ModelGraph, _DecoderCore, apply_adapter
from .numerics import ParamStore
from .tensor import NumericsError, Tensor, no_grad

__all__ = [
    "Hypothesis",
    "CascadeResult",
    "greedy_decode",
    "greedy_decode_batch",
    "beam_decode",
    "cascade",
    "default_direction",
]

_LOGP_FLOOR = 1e-300


@dataclass
class Hypothesis:
    tokens: list[int]  # emitted ids; ends with EOS when finished
    score: float  # cumulative model log-probability (nats)
    finished: bool
    flag: str | None = None

    def normalized(self, alpha: float) -> float:
        return self.score / max(1, len(self.tokens)) ** alpha

    def content(self, vocab: Vocabulary) -> list[int]:
        """Token ids with EOS and any other reserved ids stripped."""
        return [t for t in self.tokens if t < vocab.content_size]


@dataclass
class CascadeResult:
    translation: Hypothesis
    transcript: Hypothesis


def default_direction(topology: str) -> str:
    if topology == "asr":
        return "asr"
    if topology == "mt":
        return "mt"
    return "st"


def _speech_batch(x: np.ndarray) -> Batch:
    x = np.asarray(x, dtype=np.float64)
    return Batch(
        ids=[0],
        frames=x[None],
        frame_mask=np.ones((1, x.shape[0])),
        src=np.zeros((1, 1), dtype=np.int64),
        src_mask=np.zeros((1, 1)),
        tgt=np.zeros((1, 1), dtype=np.int64),
        tgt_mask=np.zeros((1, 1)),
    )


def _text_batch(graph: ModelGraph, ids: np.ndarray) -> Batch:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise NumericsError("cannot encode an empty source sequence")
    return Batch(
        ids=[0],
        frames=np.zeros((1, 1, graph.config.feature_dim)),
        frame_mask=np.zeros((1, 1)),
        src=ids[None],
        src_mask=np.ones((1, len(ids))),
        tgt=np.zeros((1, 1), dtype=np.int64),
        tgt_mask=np.zeros((1, 1)),
    )


def _input_batch(graph: ModelGraph, x: np.ndarray, direction: str) -> Batch:
    return _text_batch(graph, x) if direction == "mt" else _speech_batch(x)


def prepare_memories(
    graph: ModelGraph, store: ParamStore, batch: Batch, direction: str
) -> tuple[list[tuple[str, EncoderStates]], str, Vocabulary]:
    """Encode inputs for a decode direction.

    Returns (memories, decoder prefix, output-side vocabulary). For the tied
    topologies the first decoder is rolled out greedily (capped at the pooled
    frame count) to build the second decoder's memory.
    """
    src_vocab, tgt_vocab = models._vocabs(graph)
    topo = graph.topology
    if direction == "st":
        if topo in ("direct", "one2many", "many2one"):
            enc = models.run_speech_encoder(graph, store, batch)
            if graph.adapter_position == "encoder_top":
                enc = apply_adapter(graph, store, enc)
            return [("attn", enc)], "decoder_st", tgt_vocab
        if topo in ("tied_cascade", "tied_triangle"):
            enc = models.run_speech_encoder(graph, store, batch)
            limits = np.maximum(1, enc.lengths)
            rollout = models.run_decoder_greedy_rollout(
                graph, store, "decoder_asr", [("attn", enc)], limits, src_vocab
            )
            dec_mem = EncoderStates(rollout.states, rollout.state_mask, rollout.state_mask.sum(1))
            if graph.adapter_position == "asr_decoder_top":
                dec_mem = apply_adapter(graph, store, dec_mem)
            mems = [("attn", enc), ("attn_dec", dec_mem)] if topo == "tied_triangle" else [("attn_dec", dec_mem)]
            return mems, "decoder_st", tgt_vocab
        raise NumericsError(f"topology {topo!r} does not decode direction 'st'")
    if direction == "asr":
        if topo not in ("asr", "one2many", "tied_cascade", "tied_triangle"):
            raise NumericsError(f"topology {topo!r} does not decode direction 'asr'")
        enc = models.run_speech_encoder(graph, store, batch)
        if graph.adapter_position == "encoder_top":
            enc = apply_adapter(graph, store, enc)
        return [("attn", enc)], "decoder_asr", src_vocab
    if direction == "mt":
        if topo not in ("mt", "many2one"):
            raise NumericsError(f"topology {topo!r} does not decode direction 'mt'")
        enc = models.run_text_encoder(graph, store, batch.src, batch.src_mask)
        return [("attn", enc)], "decoder_st", tgt_vocab
    raise NumericsError(f"unknown decode direction {direction!r}")


def greedy_decode_batch(
    graph: ModelGraph,
    store: ParamStore,
    batch: Batch,
    max_len: int,
    direction: str | None = None,
) -> list[Hypothesis]:
    """Argmax decoding over a whole padded batch at once."""
    direction = direction or default_direction(graph.topology)
    with no_grad():
        memories, prefix, vocab = prepare_memories(graph, store, batch, direction)
        core = _DecoderCore(graph, store, prefix, memories, vocab.size)
        B = batch.size
        layers, feedback = core.initial_state(B)
        prev = np.full(B, vocab.bos_id, dtype=np.int64)
        alive = np.ones(B, dtype=bool)
        tokens: list[list[int]] = [[] for _ in range(B)]
        scores = np.zeros(B)
        for _ in range(max_len):
            if not alive.any():
                break
            probs, ctx, feedback = core.step(prev, layers, feedback, False, None)
            chosen = probs.data.argmax(axis=-1)  # first max -> lowest id on ties
            logp = np.log(np.maximum(probs.data[np.arange(B), chosen], _LOGP_FLOOR))
            for b in range(B):
                if alive[b]:
                    tokens[b].append(int(chosen[b]))
                    scores[b] += logp[b]
            layers = core.advance(chosen, ctx, layers, alive.astype(np.float64))
            alive = alive & (chosen != vocab.eos_id)
            prev = chosen
    return [
        Hypothesis(
            tokens=tokens[b],
            score=float(scores[b]),
            finished=bool(tokens[b] and tokens[b][-1] == vocab.eos_id),
        )
        for b in range(B)
    ]


def greedy_decode(graph, store, x: np.ndarray, max_len: int, direction: str | None = None) -> Hypothesis:
    """Argmax token per step until EOS or max_len."""
    direction = direction or default_direction(graph.topology)
    return greedy_decode_batch(graph, store, _input_batch(graph, x, direction), max_len, direction)[0]


def _gather_state(layers, feedback, parents: np.ndarray):
    new_layers = [(Tensor(h.data[parents]), Tensor(c.data[parents])) for h, c in layers]
    new_feedback = [Tensor(fb.data[parents]) for fb in feedback]
    return new_layers, new_feedback


def beam_decode(
    graph: ModelGraph,
    store: ParamStore,
    x: np.ndarray,
    beam: int,
    max_len: int,
    len_norm: float = 0.6,
    direction: str | None = None,
) -> Hypothesis:
    """Beam search returning the best finished hypothesis under the
    length-normalized score score / len(tokens)^len_norm.

    Candidates with equal scores are ordered by their token sequence, so
    lower ids win ties and beam=1 reproduces greedy_decode token for token.
    Finished hypotheses leave the beam; if nothing finishes within max_len,
    the best unfinished hypothesis is returned with finished=False.
    """
    if beam < 1:
        raise NumericsError("beam must be >= 1")
    direction = direction or default_direction(graph.topology)
    batch = _input_batch(graph, x, direction)
    with no_grad():
        base_memories, prefix, vocab = prepare_memories(graph, store, batch, direction)
        memories = _tile_memories(base_memories, beam)
        core = _DecoderCore(graph, store, prefix, memories, vocab.size)
        layers, feedback = core.initial_state(beam)
        prev = np.full(beam, vocab.bos_id, dtype=np.int64)
        scores = np.zeros(beam)
        tokens: list[tuple[int, ...]] = [() for _ in range(beam)]
        n_active = 1  # lane slots beyond n_active are dummies
        finished: list[Hypothesis] = []
        for _ in range(max_len):
            if n_active == 0:
                break
            probs, ctx, new_feedback = core.step(prev, layers, feedback, False, None)
            logp = np.log(np.maximum(probs.data, _LOGP_FLOOR))
            candidates = []
            for li in range(n_active):
                for v in range(vocab.size):
                    candidates.append((scores[li] + logp[li, v], tokens[li] + (v,), li, v))
            candidates.sort(key=lambda c: (-c[0], c[1]))
            survivors = []
            for score, toks, li, v in candidates[:beam]:
                if v == vocab.eos_id:
                    finished.append(Hypothesis(tokens=list(toks), score=float(score), finished=True))
                else:
                    survivors.append((score, toks, li, v))
            if not survivors:
                n_active = 0
                break
            parents = np.zeros(beam, dtype=np.int64)
            step_tokens = np.full(beam, vocab.pad_id, dtype=np.int64)
            for slot, (score, toks, li, v) in enumerate(survivors):
                parents[slot] = li
                step_tokens[slot] = v
                scores[slot] = score
                tokens[slot] = toks
            layers, feedback = _gather_state(layers, new_feedback, parents)
            ctx = Tensor(ctx.data[parents])
            step_mask = (np.arange(beam) < len(survivors)).astype(np.float64)
            layers = core.advance(step_tokens, ctx, layers, step_mask)
            prev = step_tokens
            n_active = len(survivors)
        if n_active > 0:  # ran out of steps with alive lanes
            for li in range(n_active):
                finished.append(Hypothesis(tokens=list(tokens[li]), score=float(scores[li]), finished=False))
    done = [h for h in finished if h.finished]
    pool = done if done else finished
    pool.sort(key=lambda h: (-h.normalized(len_norm), tuple(h.tokens)))
    return pool[0]


def _tile_memories(memories, lanes: int):
    tiled = []
    for name, mem in memories:
        tiled.append(
            (
                name,
                EncoderStates(
                    Tensor(np.repeat(mem.states.data, lanes, axis=0)),
                    np.repeat(mem.mask, lanes, axis=0),
                    np.repeat(mem.input_lengths, lanes, axis=0),
                ),
            )
        )
    return tiled


def cascade(
    asr_graph: ModelGraph,
    asr_store: ParamStore,
    mt_graph: ModelGraph,
    mt_store: ParamStore,
    x: np.ndarray,
    beam: int = 12,
    max_len: int = 64,
    len_norm: float = 0.6,
) -> CascadeResult:
    """ASR beam decode, then MT beam decode of the transcript."""
    if asr_graph.config.src_vocab_size != mt_graph.config.src_vocab_size:
        raise NumericsError(
            f"vocabulary mismatch: ASR source size {asr_graph.config.src_vocab_size} "
            f"!= MT source size {mt_graph.config.src_vocab_size}"
        )
    transcript = beam_decode(asr_graph, asr_store, x, beam, max_len, len_norm, direction="asr")
    src_vocab, _ = models._vocabs(asr_graph)
    content = transcript.content(src_vocab)
    if not content:
        empty = Hypothesis(tokens=[], score=0.0, finished=False, flag="empty_transcript")
        return CascadeResult(translation=empty, transcript=transcript)
    translation = beam_decode(mt_graph, mt_store, np.asarray(content), beam, max_len, len_norm, direction="mt")
    return CascadeResult(translation=translation, transcript=transcript)
