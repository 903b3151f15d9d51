"""Training loop: Adam with plateau LR decay, per-checkpoint dev evaluation,
layer-wise encoder growth, and best-checkpoint selection on dev BLEU.

A run is reproducible from (config, seed): batch order, dropout streams, and
initialization are all derived deterministically, and the emitted
metrics.jsonl contains no wall-clock data.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from . import models, transplant
from .data import Dataset, batch as make_batches
from .decode import beam_decode, greedy_decode_batch
from .models import LossBreakdown, ModelGraph
from .numerics import LrSchedule, OptimizerState, ParamStore, adam_step, backward, plateau_update, rng_for
from .tensor import NonFiniteError, no_grad

__all__ = ["TrainSchedule", "RunRecord", "DivergenceError", "train_model", "evaluate_model", "decode_corpus"]

log = logging.getLogger("deskst")


class DivergenceError(Exception):
    """Training produced a non-finite loss or update."""


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 8e-4
    lr_decay: float = 0.9
    lr_patience: int = 6
    eval_every: int = 1  # epochs between dev checkpoints
    max_len: int | None = 75  # token filter, as in the full-scale recipe
    growth: tuple[tuple[int, int], ...] = ()  # (epoch, encoder layers) pairs
    dev_beam: int = 1  # 1 -> greedy dev decoding (fast); >1 -> beam
    len_norm: float = 0.6
    keep: str = "best"  # "best" prunes superseded checkpoint files, "all" keeps


_PRIMARY_TASK = {
    "direct": "st",
    "one2many": "st",
    "many2one": "st",
    "tied_cascade": "st",
    "tied_triangle": "st",
    "asr": "asr",
    "mt": "mt",
}


@dataclass
class RunRecord:
    rows: list[dict] = field(default_factory=list)
    out_dir: Path | None = None

    @property
    def best_index(self) -> int:
        """Index of the max-dev-BLEU row; ties go to the earliest row."""
        best = 0
        for i, row in enumerate(self.rows):
            if row["dev"]["bleu"] > self.rows[best]["dev"]["bleu"]:
                best = i
        return best

    @property
    def best_row(self) -> dict:
        return self.rows[self.best_index]

    def epochs_to_accuracy(self, threshold: float) -> int | None:
        """First recorded epoch whose dev token accuracy reaches threshold."""
        for row in self.rows:
            if row["dev"]["token_accuracy"] >= threshold:
                return row["epoch"]
        return None


def _primary_refs(ds: Dataset, task: str) -> list[str]:
    if task == "asr":
        return [ds.src_vocab.to_words(ex.f.ids) for ex in ds.examples]
    return [ds.tgt_vocab.to_words(ex.e.ids) for ex in ds.examples]


def decode_corpus(
    graph: ModelGraph,
    store: ParamStore,
    ds: Dataset,
    direction: str,
    beam: int,
    max_len: int,
    len_norm: float = 0.6,
) -> list[str]:
    """Decode every example to a whitespace-joined content-token sentence."""
    vocab = ds.src_vocab if direction == "asr" else ds.tgt_vocab
    hyps: list[str] = []
    if beam <= 1:
        batches, _ = make_batches(ds, 32)
        for b in batches:
            for hyp in greedy_decode_batch(graph, store, b, max_len, direction):
                hyps.append(vocab.to_words(hyp.content(vocab)))
        return hyps
    for ex in ds.examples:
        x = ex.f.ids if direction == "mt" else ex.x.frames
        hyp = beam_decode(graph, store, x, beam, max_len, len_norm, direction)
        hyps.append(vocab.to_words(hyp.content(vocab)))
    return hyps


def evaluate_model(
    graph: ModelGraph,
    store: ParamStore,
    dev: Dataset,
    schedule: TrainSchedule,
    with_wer: bool | None = None,
) -> dict:
    """Teacher-forced accuracy/loss plus decode metrics on the dev set."""
    task = _PRIMARY_TASK[graph.topology]
    cfg = graph.config
    dev_batches, _ = make_batches(
        dev, 32, max_len=schedule.max_len, pool_product=cfg.pool_product, ctc_filter=cfg.ctc_enabled
    )
    hits = steps = 0
    loss_sum = 0.0
    with no_grad():
        for b in dev_batches:
            parts = models.forward(graph, store, b, mode="speech" if graph.topology == "many2one" else None)
            h, s = parts.token_hits[task]
            hits += h
            steps += s
            loss_sum += parts.combined.item()
    max_target = max(ex.e.length for ex in dev.examples) if dev.examples else 8
    max_len = 2 * max_target + 2
    hyps = decode_corpus(graph, store, dev, task, schedule.dev_beam, max_len, schedule.len_norm)
    refs = _primary_refs(dev, task)
    out = {
        "token_accuracy": round(hits / steps, 6) if steps else 0.0,
        "loss_per_token": round(loss_sum / steps, 6) if steps else 0.0,
        "bleu": round(metrics_mod.bleu(hyps, refs), 4),
        "ter": round(metrics_mod.ter(hyps, refs), 4),
    }
    if with_wer is None:
        with_wer = "decoder_asr." in graph.component_prefixes() or graph.topology == "asr"
    if with_wer:
        asr_hyps = hyps if task == "asr" else decode_corpus(graph, store, dev, "asr", 1, max_len)
        asr_refs = _primary_refs(dev, "asr")
        out["wer"] = round(metrics_mod.wer(asr_hyps, asr_refs), 4)
    return out


def train_model(
    graph: ModelGraph,
    store: ParamStore,
    train: Dataset,
    dev: Dataset,
    schedule: TrainSchedule,
    out_dir: str | Path | None = None,
    seed: int = 0,
) -> tuple[RunRecord, transplant.Checkpoint]:
    """Run the full training recipe and return (record, best checkpoint).

    Dev metrics are recorded at epoch 0 (initialization) and after every
    ``eval_every`` epochs; the best checkpoint maximizes dev BLEU.
    """
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "metrics.jsonl").write_text("")
    cfg = graph.config
    opt = OptimizerState(learning_rate=schedule.learning_rate)
    lr_sched = LrSchedule(lr=schedule.learning_rate, decay_factor=schedule.lr_decay, patience=schedule.lr_patience)
    rngs = models.dropout_streams(seed)
    order_rng = rng_for(seed, "batch-order")
    growth = dict(schedule.growth)
    record = RunRecord(out_dir=out_path)
    best_snapshot: dict[str, np.ndarray] | None = None
    best_graph = graph
    best_bleu = -1.0
    best_step = 0
    mode_counter = 0
    step = 0

    def snapshot_row(epoch: int, train_stats: dict | None) -> None:
        nonlocal best_snapshot, best_graph, best_bleu, best_step
        dev_stats = evaluate_model(graph, store, dev, schedule)
        lr_now = plateau_update(lr_sched, dev_stats["bleu"]) if epoch > 0 else lr_sched.lr
        opt.learning_rate = lr_now
        row = {
            "step": step,
            "epoch": epoch,
            "lr": lr_now,
            "train": train_stats,
            "dev": dev_stats,
            "checkpoint": f"ckpt-{step}",
        }
        record.rows.append(row)
        if out_path is not None:
            with (out_path / "metrics.jsonl").open("a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
            transplant.save(graph, store, out_path / f"ckpt-{step}", dev_history=record.rows)
        if dev_stats["bleu"] > best_bleu:
            best_bleu = dev_stats["bleu"]
            best_step = step
            best_snapshot = store.state_dict()
            best_graph = graph
            if out_path is not None:
                (out_path / "best").write_text(json.dumps({"checkpoint": f"ckpt-{step}", "dev_bleu": best_bleu}) + "\n")
        if out_path is not None and schedule.keep == "best":
            for f in out_path.glob("ckpt-*"):
                if f.name not in (f"ckpt-{best_step}", f"ckpt-{step}"):
                    f.unlink()
        log.info("epoch %d step %d dev %s lr %.2e", epoch, step, dev_stats, lr_now)

    snapshot_row(0, None)
    for epoch in range(1, schedule.epochs + 1):
        if epoch in growth:
            graph = models.grow_encoder(graph, store, growth[epoch])
            log.info("epoch %d: grew encoder to %d layers", epoch, growth[epoch])
        kept, _ = make_batches(
            train, schedule.batch_size, max_len=schedule.max_len, pool_product=cfg.pool_product, ctc_filter=cfg.ctc_enabled
        )
        n_examples = sum(b.size for b in kept)
        order = order_rng.permutation(n_examples)
        batches, _ = make_batches(
            train,
            schedule.batch_size,
            max_len=schedule.max_len,
            pool_product=cfg.pool_product,
            ctc_filter=cfg.ctc_enabled,
            order=order,
        )
        sums: dict[str, float] = {}
        tokens = 0
        for b in batches:
            mode = None
            if graph.topology == "many2one":
                mode = "speech" if mode_counter % 2 == 0 else "text"
                mode_counter += 1
            try:
                parts = models.forward(graph, store, b, mode=mode, training=True, rngs=rngs)
                grads = backward(parts.combined, store)
                adam_step(store, grads, opt)
            except NonFiniteError as exc:
                raise DivergenceError(f"non-finite value at step {step} (epoch {epoch}): {exc}") from exc
            step += 1
            for key, value in parts.floats().items():
                sums[key] = sums.get(key, 0.0) + value
            tokens += sum(t for (_, t) in parts.token_hits.values())
        train_stats = {k: round(v / max(1, tokens), 6) for k, v in sums.items()}
        train_stats["n_batches"] = len(batches)
        if epoch % schedule.eval_every == 0 or epoch == schedule.epochs:
            snapshot_row(epoch, train_stats)

    values = best_snapshot if best_snapshot is not None else store.state_dict()
    best = transplant.Checkpoint(graph=best_graph, values=values, dev_history=record.rows, seed=store.rng_seed)
    return record, best
