"""Training runs, threshold sweeps, routing analysis and cost-model fitting.

Run directory layout
--------------------
``config.json``      exact :class:`RunConfig` used (absolute paths)
``metrics.csv``      one row per optimizer step (or ``metrics.jsonl``)
``eval.csv``         validation loss every ``eval_every`` steps and at each epoch end
``schedule.txt``     per epoch: ``<epoch>\\t<sample ids in training order>``
``routing/epoch_<n>.npz``  per-token routing of every step of epoch ``n``
``checkpoint.npz``   final parameters (see :func:`adaptmoe.model.save_checkpoint`)
``summary.json``     final numbers of the run
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .cost import REFERENCE_PAIRS, fit_omega, normalized_compute, step_time_model
from .curriculum import ComplexityVector, epoch_schedule, format_schedule_line
from .data import export_metrics, load_corpus, make_batches, metrics_columns, read_metrics
from .model import Adam, Model, TrainState, eval_policy, evaluate, save_checkpoint, train_step

log = logging.getLogger(__name__)

EVAL_COLUMNS = ["step", "epoch", "val_loss", "val_frac_top2"]


@dataclass
class RunResult:
    run_dir: Path
    metrics: list[dict]
    evals: list[dict]
    schedules: dict[int, list[int]] = field(default_factory=dict)

    @property
    def final_val_loss(self) -> float:
        return self.evals[-1]["val_loss"] if self.evals else float("nan")

    @property
    def total_expert_flops(self) -> float:
        return float(sum(m["batch_expert_flops"] for m in self.metrics))

    @property
    def mean_frac_top1(self) -> float:
        tokens = sum(m["tokens"] for m in self.metrics)
        if not tokens:
            return 1.0
        return sum(m["frac_top1"] * m["tokens"] for m in self.metrics) / tokens

    def steps_to_reach(self, target: float) -> int | None:
        for row in self.evals:
            if row["val_loss"] <= target:
                return row["step"]
        return None


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])


def _save_routing(path: Path, steps: list[dict]) -> None:
    arrays = {}
    for k, step in enumerate(steps):
        for key, value in step.items():
            arrays[f"s{k}_{key}"] = value
    np.savez_compressed(path, n_steps=np.array(len(steps)), **arrays)


def load_routing(path) -> list[dict]:
    """Per-step routing of one epoch: ``sample_ids``, ``lengths``, and per layer ``is_top2_<i>``,
    ``first_<i>``, ``second_<i>`` over the step's non-pad tokens (row-major)."""
    with np.load(path) as z:
        n = int(z["n_steps"])
        steps = [{} for _ in range(n)]
        for key in z.files:
            if key == "n_steps":
                continue
            k, _, name = key.partition("_")
            steps[int(k[1:])][name] = z[key]
    return steps


def train(cfg: RunConfig, run_dir=None) -> RunResult:
    """Train per ``cfg`` and write the run directory."""
    run_dir = Path(run_dir or cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.json")

    train_corpus = load_corpus(cfg.train_path, cfg.task, cfg.max_seq_len)
    vocab, labels = train_corpus.vocab, train_corpus.labels
    val_corpus = load_corpus(cfg.val_path, cfg.task, cfg.max_seq_len, vocab=vocab, labels=labels) \
        if cfg.val_path else None
    mcfg = cfg.model_config(len(vocab), len(labels) if labels else 2)
    model = Model(mcfg, seed=cfg.seed)
    state = TrainState(model, Adam(model.parameters(), lr=cfg.lr))
    val_batches = make_batches(val_corpus.samples, [s.sample_id for s in val_corpus.samples],
                               cfg.batch_size, vocab.pad_id) if val_corpus else []
    val_policy = eval_policy(mcfg, cfg.eval_policy)
    omega = fit_omega(form=cfg.cost_form).omega
    samples = train_corpus.samples
    ids = [s.sample_id for s in samples]

    metrics: list[dict] = []
    evals: list[dict] = []
    schedules: dict[int, list[int]] = {}
    vectors: list[ComplexityVector] | None = None
    (run_dir / "schedule.txt").write_text("", encoding="utf-8")
    if cfg.save_routing:
        (run_dir / "routing").mkdir(exist_ok=True)

    def run_eval(epoch):
        if val_batches:
            res = evaluate(model, val_batches, val_policy)
            evals.append({"step": state.step, "epoch": epoch, "val_loss": res["loss"],
                          "val_frac_top2": res["frac_top2"]})

    done = False
    for epoch in range(1, cfg.epochs + 1):
        order = epoch_schedule(epoch, ids, vectors, cfg.curriculum, cfg.seed, cfg.anchor_by)
        schedules[epoch] = order
        with open(run_dir / "schedule.txt", "a", encoding="utf-8") as fh:
            fh.write(format_schedule_line(epoch, order) + "\n")
        counts: dict[int, tuple] = {}
        routing_steps = []
        for batch in make_batches(samples, order, cfg.batch_size, vocab.pad_id):
            res = train_step(state, batch)
            rec = res.record
            lengths = batch.lengths
            per_sample = rec.sample_top2_counts(len(batch))
            for row, sid in enumerate(batch.sample_ids):
                counts[int(sid)] = (per_sample[row], int(lengths[row]))
            row = {"step": state.step, "epoch": epoch, "loss": res.loss, "task_loss": res.task_loss,
                   "aux_loss": res.aux_loss}
            row.update({f"top2_ratio_{i}": r for i, r in enumerate(res.top2_ratios)})
            row.update({"frac_top1": res.cost.frac_top1, "norm_compute": res.cost.norm_compute,
                        "modeled_step_time": step_time_model(res.cost.frac_top1, omega, cfg.cost_form),
                        "batch_expert_flops": res.cost.batch_expert_flops,
                        "tokens": int(lengths.sum())})
            metrics.append(row)
            if cfg.save_routing:
                step = {"sample_ids": batch.sample_ids, "lengths": lengths}
                for i, r in enumerate(rec.routings):
                    step[f"is_top2_{i}"] = r.is_top2
                    step[f"first_{i}"] = r.first.astype(np.int16)
                    step[f"second_{i}"] = r.second.astype(np.int16)
                routing_steps.append(step)
            if state.step % cfg.eval_every == 0:
                run_eval(epoch)
            if cfg.max_steps and state.step >= cfg.max_steps:
                done = True
                break
        if cfg.save_routing:
            _save_routing(run_dir / "routing" / f"epoch_{epoch}.npz", routing_steps)
        if not evals or evals[-1]["step"] != state.step:
            run_eval(epoch)
        if len(counts) == len(ids):
            vectors = [ComplexityVector(sid, tuple(int(c) / n for c in cnt), n)
                       for sid, (cnt, n) in sorted(counts.items())]
        log.info("epoch %d step %d loss %.4f val %.4f", epoch, state.step,
                 metrics[-1]["loss"] if metrics else float("nan"),
                 evals[-1]["val_loss"] if evals else float("nan"))
        if done:
            break

    columns = metrics_columns(cfg.num_layers) + ["tokens"]
    metrics_path = run_dir / f"metrics.{cfg.metrics_format}"
    if cfg.metrics_format == "csv":
        _write_csv(metrics_path, columns, metrics)
    else:
        export_metrics(metrics, metrics_path, "jsonl", cfg.num_layers)
    _write_csv(run_dir / "eval.csv", EVAL_COLUMNS, evals)
    save_checkpoint(run_dir / "checkpoint.npz", model,
                    extra={"vocab": vocab.symbols, "labels": labels, "step": state.step})
    result = RunResult(run_dir, metrics, evals, schedules)
    summary = {
        "steps": state.step,
        "final_val_loss": result.final_val_loss if evals else None,
        "mean_frac_top1": result.mean_frac_top1,
        "norm_compute": normalized_compute(result.mean_frac_top1),
        "total_expert_flops": result.total_expert_flops,
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return result


def read_evals(run_dir) -> list[dict]:
    with open(Path(run_dir) / "eval.csv", encoding="utf-8", newline="") as fh:
        return [{"step": int(r["step"]), "epoch": int(r["epoch"]), "val_loss": float(r["val_loss"]),
                 "val_frac_top2": float(r["val_frac_top2"])} for r in csv.DictReader(fh)]


# -- sweep -------------------------------------------------------------------

SWEEP_COLUMNS = ["threshold", "final_loss", "mean_frac_top1", "mean_frac_top2", "norm_compute", "steps"]


def sweep(cfg: RunConfig, thresholds: Sequence[float], out_dir=None) -> list[dict]:
    """One adaptive sub-run per threshold, same seed; writes ``sweep.csv``."""
    if not thresholds:
        raise ValueError("sweep needs at least one threshold")
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for t in thresholds:
        sub = replace(cfg, policy="adaptive", threshold=float(t), output_dir=str(out / f"T_{t:g}"))
        res = train(sub)
        f1 = res.mean_frac_top1
        rows.append({"threshold": float(t), "final_loss": res.final_val_loss if res.evals else float("nan"),
                     "mean_frac_top1": f1, "mean_frac_top2": 1.0 - f1,
                     "norm_compute": normalized_compute(f1), "steps": len(res.metrics)})
    _write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
    return rows


# -- analysis ----------------------------------------------------------------

def analyze(run_dir) -> dict:
    """Per-layer percentage of two-expert tokens: per step and token-weighted per epoch.

    Writes ``analysis_steps.csv`` (plot-ready time series) and ``analysis_epochs.csv``.
    """
    run_dir = Path(run_dir)
    candidates = [run_dir / "metrics.csv", run_dir / "metrics.jsonl"]
    path = next((p for p in candidates if p.exists()), None)
    if path is None:
        raise FileNotFoundError(f"no metrics in {run_dir}: expected {candidates[0].name} or {candidates[1].name}")
    rows = read_metrics(path)
    layers = sorted(int(k.rsplit("_", 1)[1]) for k in (rows[0] if rows else {}) if k.startswith("top2_ratio_"))
    if not layers:
        cfg = json.loads((run_dir / "config.json").read_text())
        layers = list(range(cfg["num_layers"]))
    cols = [f"layer_{i}" for i in layers]
    steps = [{"step": r["step"], "epoch": r["epoch"],
              **{f"layer_{i}": 100.0 * r[f"top2_ratio_{i}"] for i in layers}} for r in rows]
    epochs = []
    for e in sorted({r["epoch"] for r in rows}):
        sel = [r for r in rows if r["epoch"] == e]
        tok = sum(r.get("tokens", 1) for r in sel)
        epochs.append({"epoch": e, **{
            f"layer_{i}": 100.0 * sum(r[f"top2_ratio_{i}"] * r.get("tokens", 1) for r in sel) / tok
            for i in layers}})
    _write_csv(run_dir / "analysis_steps.csv", ["step", "epoch"] + cols, steps)
    _write_csv(run_dir / "analysis_epochs.csv", ["epoch"] + cols, epochs)
    return {"layers": layers, "steps": steps, "epochs": epochs}


def recount_epoch(run_dir, epoch: int) -> list[float]:
    """Per-layer two-expert percentage for ``epoch`` recounted from stored per-token routing."""
    steps = load_routing(Path(run_dir) / "routing" / f"epoch_{epoch}.npz")
    layers = sorted(int(k.split("_")[-1]) for k in steps[0] if k.startswith("is_top2_")) if steps else []
    out = []
    for i in layers:
        top2 = sum(int(s[f"is_top2_{i}"].sum()) for s in steps)
        tokens = sum(len(s[f"is_top2_{i}"]) for s in steps)
        out.append(100.0 * top2 / tokens)
    return out


def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [[str(h) for h in header]] + [[f"{v:.4f}" if isinstance(v, float) else str(v) for v in r] for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(header))]
    return "\n".join("  ".join(c[i].rjust(widths[i]) for i in range(len(c))) for c in cells)


def fit_report(pairs=REFERENCE_PAIRS, form: str = "straggler") -> str:
    fit = fit_omega(pairs, form)
    rows = [(float(c), float(t), float(p), float(p - t)) for c, t, p in zip(fit.compute, fit.time, fit.predicted)]
    return (f"form={form} omega={fit.omega:.6f} max|residual|={fit.max_abs_residual:.4f}\n"
            + format_table(["compute", "time", "modeled", "residual"], rows))
