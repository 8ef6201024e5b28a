"""k-shot evaluation: repeated support draws, adaptation, accuracy mean/std.

Protocol per (task, k): draw k examples per class from the labeled pool with
a per-draw seed, generate the task head from the draw, adapt with the learned
per-group step sizes for a fixed number of epochs over the support set (warp
frozen unless explicitly unfrozen), then score argmax accuracy on the full
held-out test set. Repeat for `draws` seeds and report mean and population
standard deviation.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .corpus import SentenceStore
from .encoder import encode_batch
from .meta import (
    HPHI_GROUP,
    MetaModel,
    _BatchCycler,
    _flatten_classes,
    generate_softmax,
    head_logits_graph,
    inner_adapt,
    make_fast_weights,
)
from .tasks import episode_rng

DEFAULT_K_LIST = (4, 8, 16, 32)
DEFAULT_DRAWS = 10
DEFAULT_EPOCHS_GRID = (5, 10, 50, 100)
DEFAULT_BATCH_GRID = (4, 8)


class EvalDataError(Exception):
    pass


@dataclass
class TargetTask:
    """Labeled pool for support draws plus a disjoint held-out test set."""

    name: str
    classes: list[str]
    pool: dict[str, list[np.ndarray]]
    test_tokens: list[np.ndarray]
    test_labels: np.ndarray

    def require_k(self, k: int) -> None:
        for c in self.classes:
            if len(self.pool[c]) < k:
                raise EvalDataError(
                    f"task {self.name}: class {c!r} has {len(self.pool[c])} pool "
                    f"examples, need {k}"
                )


def load_target_task(path, store: SentenceStore, name: str | None = None) -> TargetTask:
    """JSONL of {"text","label","split"} with split in {"pool","test"}."""
    pool: dict[str, list[np.ndarray]] = {}
    test: list[tuple[str, np.ndarray]] = []
    p = Path(path)
    for ln, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            text, label, split = rec["text"], str(rec["label"]), rec["split"]
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise EvalDataError(f"{path}:{ln}: malformed target-task line") from e
        if split == "pool":
            pool.setdefault(label, []).append(store.encode_text(text))
        elif split == "test":
            test.append((label, store.encode_text(text)))
        else:
            raise EvalDataError(f"{path}:{ln}: split must be 'pool' or 'test', got {split!r}")
    if not pool or not test:
        raise EvalDataError(f"{path}: need both pool and test examples")
    classes = sorted(pool)
    class_index = {c: i for i, c in enumerate(classes)}
    unknown = sorted(set(lab for lab, _ in test) - set(classes))
    if unknown:
        raise EvalDataError(f"{path}: test labels {unknown} missing from the pool")
    return TargetTask(
        name=name or p.stem,
        classes=classes,
        pool=pool,
        test_tokens=[t for _, t in test],
        test_labels=np.asarray([class_index[lab] for lab, _ in test], dtype=np.int64),
    )


def _predict_batch(model: MetaModel, fast: dict[str, np.ndarray], tokens) -> np.ndarray:
    """Argmax class per sequence under fast weights, eval mode."""
    tape = Tape()
    nodes = {e.name: tape.const(e.value) for e in model.enc.entries}
    nodes.update({e.name: tape.const(e.value) for e in model.gen.entries})
    nodes.update({name: tape.const(value) for name, value in fast.items()})
    logits = head_logits_graph(
        tape, nodes, nodes, nodes["softmax.W"], nodes["softmax.b"],
        tokens, model.enc_cfg, False, None,
    )
    return np.argmax(logits.value, axis=1)


def finetune_and_test(
    model: MetaModel,
    task: TargetTask,
    k: int,
    epochs: int,
    batch_size: int,
    seed: int,
    unfreeze_warp: bool = False,
) -> float:
    """One support draw, `epochs` adaptation passes, accuracy on the test set.

    epochs=0 scores the generated head with no adaptation. With unfreeze_warp
    the warp tensors also adapt, borrowing each layer's attention-group step
    size (warp groups own no learned step size of their own).
    """
    task.require_k(k)
    rng = episode_rng(seed, 0, stream=7)
    support_by_class = []
    for c in task.classes:
        pool = task.pool[c]
        picked = rng.choice(len(pool), size=k, replace=False)
        support_by_class.append([pool[int(i)] for i in picked])
    w, b = generate_softmax(model, support_by_class)
    state = make_fast_weights(model, w, b)

    eff_model = model
    if unfreeze_warp:
        eff_model = model.copy()
        for e in eff_model.enc.entries:
            if e.is_warp:
                e.is_warp = False
                e.inner_adaptable = True
        for i in range(eff_model.enc_cfg.n_layers):
            eff_model.lrs.alphas.setdefault(
                f"layer{i}.ff", eff_model.lrs.alphas[f"layer{i}.attn"]
            )
        state = make_fast_weights(eff_model, w, b)

    flat, slices = _flatten_classes(support_by_class)
    labels = np.concatenate(
        [np.full(hi - lo, i, dtype=np.int64) for i, (lo, hi) in enumerate(slices)]
    )
    n = len(flat)
    if epochs > 0:
        cycler = _BatchCycler(n, batch_size, rng)
        steps = epochs * max(1, n // min(batch_size, n))
        for _ in range(steps):
            idx = cycler.next()
            state, _, _ = inner_adapt(
                state, eff_model, [flat[i] for i in idx], labels[idx],
                train_mode=True, rng=rng,
            )
    preds = _predict_batch(eff_model, state.fast, task.test_tokens)
    return float(np.mean(preds == task.test_labels))


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)  # task, k, draw_seed, accuracy
    config: dict = field(default_factory=dict)

    def summary(self) -> list[dict]:
        """Mean and population std per (task, k), in row order of first appearance."""
        grouped: dict[tuple, list[float]] = {}
        order = []
        for r in self.rows:
            key = (r["task"], r["k"])
            if key not in grouped:
                grouped[key] = []
                order.append(key)
            grouped[key].append(r["accuracy"])
        out = []
        for task, k in order:
            accs = np.asarray(grouped[(task, k)])
            out.append(
                {"task": task, "k": k, "mean": float(accs.mean()),
                 "std": float(accs.std()), "draws": len(accs)}
            )
        return out

    def write_csv(self, rows_path, summary_path) -> None:
        with open(rows_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=["task", "k", "draw_seed", "accuracy"])
            writer.writeheader()
            for r in self.rows:
                writer.writerow(r)
        with open(summary_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=["task", "k", "mean", "std", "draws"])
            writer.writeheader()
            for r in self.summary():
                writer.writerow(r)


def evaluate(
    model: MetaModel,
    tasks: list[TargetTask],
    k_list=DEFAULT_K_LIST,
    draws: int = DEFAULT_DRAWS,
    epochs: int = 10,
    batch_size: int = 4,
    base_seed: int = 0,
    unfreeze_warp: bool = False,
) -> EvalReport:
    """Paper protocol: `draws` independent k-shot support draws per (task, k)."""
    report = EvalReport(
        config={
            "k_list": list(k_list), "draws": draws, "epochs": epochs,
            "batch_size": batch_size, "base_seed": base_seed,
            "unfreeze_warp": unfreeze_warp,
        }
    )
    for task in tasks:
        for k in k_list:
            for d in range(draws):
                seed = base_seed + 1000 * d
                acc = finetune_and_test(
                    model, task, k, epochs, batch_size, seed, unfreeze_warp
                )
                report.rows.append(
                    {"task": task.name, "k": k, "draw_seed": seed, "accuracy": acc}
                )
    return report


def grid_search(
    model: MetaModel,
    validation_tasks: list[TargetTask],
    epochs_grid=DEFAULT_EPOCHS_GRID,
    batch_grid=DEFAULT_BATCH_GRID,
    k: int = 16,
    draws: int = 3,
    base_seed: int = 0,
) -> tuple[int, int]:
    """Pick (epochs, batch_size) by mean validation accuracy; ties prefer
    fewer epochs, then smaller batches."""
    if not epochs_grid or not batch_grid:
        raise ValueError("grids must be non-empty")
    best = None
    for epochs in sorted(epochs_grid):
        for batch_size in sorted(batch_grid):
            accs = [
                finetune_and_test(model, task, k, epochs, batch_size, base_seed + 1000 * d)
                for task in validation_tasks
                for d in range(draws)
            ]
            mean = float(np.mean(accs))
            # strict > keeps the first (smallest) cell on ties
            if best is None or mean > best[0]:
                best = (mean, epochs, batch_size)
    return best[1], best[2]
