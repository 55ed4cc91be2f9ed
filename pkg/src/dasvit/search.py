"""Bi-level search: alternating architecture/weight updates, progressive
prune-and-deepen staging, genotype derivation, and derived-model retraining.

Each stage trains a supernet (depth grows stage by stage) with one batch
pair per step: an architecture update on the validation batch (plus the
fairness term), then a weight update on the training batch. At stage end the
lowest-scoring candidates are pruned and the next, deeper supernet inherits
every surviving parameter bank.

The architecture gradient defaults to the first-order approximation; the
unrolled variant (virtual weight step plus finite-difference second-order
correction) sits behind ``search.unrolled``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import backward, cross_entropy, dtype_scope
from .config import RunConfig, save_config
from .data import (Batch, BatchPlan, Dataset, MetricsWriter, RNG_RETRAIN, RNG_STAGE,
                   epoch_batches, load_checkpoint, make_synthetic, load_cifar10,
                   resize_images, rng_for, save_checkpoint, sequential_batches,
                   split_dataset, topk_accuracy)
from .errors import ConfigError, DataError, GenotypeError, NonFiniteError, SearchAbort
from .fairness import FairnessConfig, skip_fairness, type_fairness
from .genotype import (DerivedModel, Genotype, genotype_to_json, make_genotype,
                       save_genotype)
from .ops import ModelDims, OpSpec
from .optim import AdamW, LrSchedule
from .supernet import CELL_EDGES, NUM_EDGES, AlphaTable, Supernet


@dataclass
class StagePlan:
    """One progressive stage: depth, candidate set, epoch budget, prune count."""

    index: int
    layers: int
    candidates: list[OpSpec]
    epochs: int
    prune: int


def schedule_preview(cfg: RunConfig, stages: int | None = None) -> list[tuple[int, int]]:
    """The (candidate count, depth) sequence the search will emit."""
    n = stages if stages is not None else cfg.search.stages
    out = []
    count = len(cfg.candidates)
    for s in range(n):
        out.append((count, cfg.search.first_layers + s * cfg.search.layer_increment))
        count -= cfg.search.prune_per_stage[s]
    return out


# -- candidate scoring and pruning -----------------------------------------------


def score_candidates(alpha: AlphaTable, mode: str = "mean") -> list[tuple[OpSpec, float]]:
    """Rank candidates by softmax weight aggregated over every (layer, edge).

    Descending score; ties resolve to registry order.
    """
    w = alpha.weights()
    if mode == "mean":
        scores = w.mean(axis=(0, 1))
    elif mode == "max":
        scores = w.max(axis=(0, 1))
    else:
        raise ConfigError(f"score_candidates: unknown mode {mode!r}")
    order = sorted(range(len(alpha.candidates)), key=lambda k: (-scores[k], k))
    return [(alpha.candidates[k], float(scores[k])) for k in order]


def prune_candidates(alpha: AlphaTable, count: int, mode: str = "mean") -> list[OpSpec]:
    """Drop the `count` lowest-ranked candidates; survivors keep registry order."""
    if count <= 0:
        return list(alpha.candidates)
    ranking = score_candidates(alpha, mode)
    kept = {spec for spec, _ in ranking[:len(ranking) - count]}
    survivors = [spec for spec in alpha.candidates if spec in kept]
    if len(survivors) < 2:
        raise ConfigError(
            f"prune: only {len(survivors)} candidates would remain; search degenerates")
    return survivors


def advance_stage(old: Supernet, survivors: list[OpSpec], new_layers: int,
                  cfg: RunConfig, seed: int, stage_index: int) -> Supernet:
    """Build the next-stage supernet, inheriting banks and logits.

    Layers present in both stages copy every surviving candidate's bank
    bitwise; new layers initialize fresh. Architecture logits keep the
    surviving columns; per-layer tables give new layers the mean of the
    inherited rows.
    """
    rng = rng_for(seed, RNG_STAGE, stage_index)
    new = Supernet(old.dims, survivors, new_layers, rng,
                   lam=cfg.selector.lam, grad_mode=cfg.selector.grad_mode,
                   shared_alpha=cfg.search.shared_alpha, pre_norm=cfg.model.pre_norm,
                   final_norm=cfg.model.final_norm,
                   alpha_init_std=cfg.search.alpha_init_std)
    for name, p in new.embed.named_parameters().items():
        p.data = old.embed.named_parameters()[name].data.copy()
    for name, p in new.selector.named_parameters().items():
        p.data = old.selector.named_parameters()[name].data.copy()
    cols = [old.candidates.index(spec) for spec in survivors]
    kept = old.alpha.logits.data[:, :, cols]
    if new.alpha.shared:
        new.alpha.logits.data = kept.copy()
    else:
        rows = np.empty((new_layers, NUM_EDGES, len(survivors)), dtype=kept.dtype)
        shared_rows = min(kept.shape[0], new_layers)
        rows[:shared_rows] = kept[:shared_rows]
        rows[shared_rows:] = kept.mean(axis=0)
        new.alpha.logits.data = rows
    for layer in range(min(old.num_layers, new_layers)):
        for e in range(NUM_EDGES):
            for k_new, spec in enumerate(survivors):
                k_old = old.candidates.index(spec)
                src = old.cells[layer][e].ops[k_old].named_parameters()
                for pname, p in new.cells[layer][e].ops[k_new].named_parameters().items():
                    p.data = src[pname].data.copy()
    return new


# -- genotype derivation ------------------------------------------------------------


def derive_genotype(alpha: AlphaTable, dims: ModelDims, depth: int) -> Genotype:
    """Discretize: per intermediate node keep the two strongest incoming edges,
    each with its best non-Zero candidate.

    Edge strength is the max non-Zero softmax weight (layer-averaged); ties
    prefer the lower edge index, candidate ties the registry order.
    """
    w = alpha.weights().mean(axis=0)  # (edges, candidates)
    cands = alpha.candidates
    nonzero = [k for k, s in enumerate(cands) if s.kind != "zero"]
    if not nonzero:
        raise GenotypeError("derive: no non-Zero candidate available")
    zero_cols = [k for k, s in enumerate(cands) if s.kind == "zero"]
    nodes = []
    for target in (2, 3):
        incoming = [i for i, (_, t) in enumerate(CELL_EDGES) if t == target]
        if zero_cols and all(
                max(w[e, k] for k in zero_cols) > max(w[e, k] for k in nonzero)
                for e in incoming):
            raise GenotypeError(
                f"derive: every incoming edge of node {target} is Zero-dominant; "
                f"alpha weights:\n{np.array2string(w, precision=4)}")
        strength = {e: max(w[e, k] for k in nonzero) for e in incoming}
        kept = sorted(incoming, key=lambda e: (-strength[e], e))[:2]
        pairs = []
        for e in kept:
            best = sorted(nonzero, key=lambda k: (-w[e, k], k))[0]
            pairs.append((CELL_EDGES[e][0], cands[best]))
        nodes.append(pairs)
    return make_genotype(dims, depth, nodes[0], nodes[1])


# -- bi-level optimization ---------------------------------------------------------


@dataclass
class StepLog:
    stage: int
    epoch: int
    step: int
    loss_val: float
    loss_train: float
    l1: float
    l2: float
    l_fair: float
    lr: float

    def to_json(self) -> dict:
        return {"stage": self.stage, "epoch": self.epoch, "step": self.step,
                "loss_val": self.loss_val, "loss_train": self.loss_train,
                "l1": self.l1, "l2": self.l2, "l_fair": self.l_fair, "lr": self.lr}


@dataclass
class SearchState:
    """Everything the bi-level loop mutates, bundled for instrumentation."""

    model: object                       # forward(images) -> logits Tensor
    alpha: AlphaTable
    w_opt: AdamW
    a_opt: AdamW
    fairness: FairnessConfig
    unrolled: bool = False
    xi: float = 0.0
    stage: int = 1
    epoch: int = 0
    log: list[StepLog] = field(default_factory=list)
    alpha_sample_indices: set = field(default_factory=set)
    weight_sample_indices: set = field(default_factory=set)

    def all_tensors(self):
        seen = []
        for p in self.w_opt.params.values():
            seen.append(p)
        seen.append(self.alpha.logits)
        if hasattr(self.model, "weight_parameters"):
            seen.extend(self.model.weight_parameters().values())
        return seen

    def zero_all(self):
        for p in self.all_tensors():
            p.grad = None


def _fairness_terms(alpha: AlphaTable, cfg: FairnessConfig):
    l1 = skip_fairness(alpha)
    l2 = type_fairness(alpha, cfg)
    return l1, l2, l1 * cfg.a + l2 * cfg.b


def _unrolled_alpha_grad(state: SearchState, tb: Batch, vb: Batch):
    """Virtual-step architecture gradient with the finite-difference
    second-order correction; returns (grad, loss_val, l1, l2)."""
    model, alpha = state.model, state.alpha
    w_params = state.w_opt.params
    xi = state.xi

    state.zero_all()
    backward(cross_entropy(model.forward(tb.images), tb.labels))
    g_w = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
           for n, p in w_params.items()}

    originals = {n: p.data.copy() for n, p in w_params.items()}
    for n, p in w_params.items():
        p.data = originals[n] - xi * g_w[n]

    state.zero_all()
    l_val = cross_entropy(model.forward(vb.images), vb.labels)
    l1, l2, l_fair = _fairness_terms(alpha, state.fairness)
    backward(l_val + l_fair)
    g_alpha = alpha.logits.grad.copy()
    g_wprime = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for n, p in w_params.items()}

    norm = math.sqrt(sum(float((g**2).sum()) for g in g_wprime.values()))
    if norm > 0:
        eps = 0.01 / norm
        for sign in (1.0, -1.0):
            for n, p in w_params.items():
                p.data = originals[n] + sign * eps * g_wprime[n]
            state.zero_all()
            backward(cross_entropy(model.forward(tb.images), tb.labels))
            g = (alpha.logits.grad.copy() if alpha.logits.grad is not None
                 else np.zeros_like(alpha.logits.data))
            if sign > 0:
                g_plus = g
            else:
                g_minus = g
        g_alpha -= (xi / (2.0 * eps)) * (g_plus - g_minus)

    for n, p in w_params.items():
        p.data = originals[n]
    return g_alpha, float(l_val.data), float(l1.data), float(l2.data)


def bilevel_epoch(state: SearchState, train_batches: list[Batch],
                  val_batches: list[Batch], lr: float | None = None) -> None:
    """One epoch of alternating updates over paired (val, train) batches."""
    if lr is not None:
        state.w_opt.set_lr(lr)
    for step, (tb, vb) in enumerate(zip(train_batches, val_batches)):
        if tb.split != "train" or vb.split != "val":
            raise DataError(
                f"bilevel: expected (train, val) batch pair, got ({tb.split}, {vb.split})")
        state.alpha_sample_indices.update(int(i) for i in vb.indices)
        state.weight_sample_indices.update(int(i) for i in tb.indices)

        # architecture update on the validation batch
        if state.unrolled and state.xi != 0.0:
            grad, loss_val, l1_v, l2_v = _unrolled_alpha_grad(state, tb, vb)
            state.zero_all()
            state.alpha.logits.grad = grad
        else:
            state.zero_all()
            l_val = cross_entropy(state.model.forward(vb.images), vb.labels)
            l1, l2, l_fair = _fairness_terms(state.alpha, state.fairness)
            backward(l_val + l_fair)
            loss_val, l1_v, l2_v = float(l_val.data), float(l1.data), float(l2.data)
        state.a_opt.step()

        # weight update on the training batch, architecture frozen
        state.zero_all()
        l_train = cross_entropy(state.model.forward(tb.images), tb.labels)
        backward(l_train)
        state.w_opt.step()

        fair = state.fairness
        state.log.append(StepLog(
            stage=state.stage, epoch=state.epoch, step=step,
            loss_val=loss_val, loss_train=float(l_train.data),
            l1=l1_v, l2=l2_v, l_fair=fair.a * l1_v + fair.b * l2_v,
            lr=state.w_opt.lr))


# -- datasets ------------------------------------------------------------------------


def build_datasets(cfg: RunConfig, seed: int) -> tuple[Dataset, Dataset]:
    """(train, held-out) datasets per the data config."""
    if cfg.data.source == "synthetic":
        syn = cfg.data.synthetic
        train = make_synthetic(syn.classes, syn.per_class, syn.image, seed,
                               channels=syn.channels, noise=syn.noise)
        test = make_synthetic(syn.classes, max(1, syn.per_class // 4), syn.image,
                              seed + 1, channels=syn.channels, noise=syn.noise)
    else:
        if cfg.data.dir is None:
            raise DataError("data.dir: required for cifar10")
        train, test = load_cifar10(cfg.data.dir)
    if cfg.data.resize is not None:
        train = Dataset(resize_images(train.images, cfg.data.resize,
                                      cfg.data.resize_method),
                        train.labels, train.classes)
        test = Dataset(resize_images(test.images, cfg.data.resize,
                                     cfg.data.resize_method),
                       test.labels, test.classes)
    return train, test


def _norm_stats(cfg: RunConfig):
    if cfg.data.normalize_mean is None:
        return None
    return (np.asarray(cfg.data.normalize_mean, dtype=np.float32),
            np.asarray(cfg.data.normalize_std, dtype=np.float32))


# -- evaluation ----------------------------------------------------------------------


def evaluate(model, dataset: Dataset, batch_size: int, stats=None) -> dict:
    """Loss/top-1/top-5 of `model` over `dataset`, batched sequentially."""
    losses, top1, top5, total = 0.0, 0.0, 0.0, 0
    for batch in sequential_batches(dataset, batch_size, stats=stats):
        logits = model.forward(batch.images)
        loss = cross_entropy(logits, batch.labels)
        n = len(batch.labels)
        losses += float(loss.data) * n
        top1 += topk_accuracy(logits.data, batch.labels, 1) * n
        top5 += topk_accuracy(logits.data, batch.labels, 5) * n
        total += n
    return {"loss": losses / total, "top1": top1 / total, "top5": top5 / total}


# -- search driver -------------------------------------------------------------------


@dataclass
class SearchResult:
    genotype: Genotype
    out_dir: Path
    schedule: list[tuple[int, int]]
    state: SearchState
    genotype_path: Path
    history_path: Path
    log_path: Path


def _write_alpha_rows(writer, epoch: int, model: Supernet) -> None:
    logits = model.alpha.logits.data
    weights = model.alpha.weights()
    for layer in range(model.num_layers):
        row = model.alpha.row_for_layer(layer)
        for e in range(NUM_EDGES):
            for k, spec in enumerate(model.alpha.candidates):
                writer.writerow([epoch, layer, e, spec.name,
                                 repr(float(logits[row, e, k])),
                                 repr(float(weights[row, e, k]))])


def _build_optimizers(model: Supernet, cfg: RunConfig) -> tuple[AdamW, AdamW]:
    include_selector = cfg.selector.grad_mode == "score_scaling"
    w_opt = AdamW(model.weight_parameters(include_selector=include_selector),
                  lr=cfg.search.lr, weight_decay=cfg.search.weight_decay)
    a_opt = AdamW(model.alpha_parameters(), lr=cfg.search.arch_lr,
                  weight_decay=cfg.search.arch_weight_decay)
    return w_opt, a_opt


def _dump_diagnostics(out_dir: Path, state: SearchState, exc: Exception) -> Path:
    dump = {
        "error": str(exc),
        "stage": state.stage,
        "epoch": state.epoch,
        "alpha_logits": state.alpha.logits.data.tolist(),
        "alpha_weights": state.alpha.weights().tolist(),
        "last_steps": [entry.to_json() for entry in state.log[-5:]],
    }
    path = out_dir / "diagnostic.json"
    path.write_text(json.dumps(dump, indent=2, sort_keys=True) + "\n")
    return path


def run_search(cfg: RunConfig, out_dir, seed: int | None = None,
               stages: int | None = None, resume=None) -> SearchResult:
    """Run the staged search end to end and write every artifact.

    Artifacts: config.json (effective), alpha_history.csv, search_log.jsonl,
    stage_<n>.ckpt(+.blob) at each stage end, genotype.json. Resuming points
    at a stage checkpoint and continues from the following stage.
    """
    cfg = replace(cfg, seed=cfg.seed if seed is None else int(seed)).validate()
    seed = cfg.seed
    n_stages = cfg.search.stages if stages is None else min(stages, cfg.search.stages)
    if n_stages < 1:
        raise ConfigError("search: need at least one stage")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")

    with dtype_scope(cfg.model.precision):
        train_ds, _ = build_datasets(cfg, seed)
        split = split_dataset(len(train_ds), cfg.search.val_fraction, seed)
        stats = _norm_stats(cfg)
        plan = BatchPlan(batch_size=cfg.search.batch_size, seed=seed,
                         drop_last=cfg.search.drop_last)
        dims = cfg.model.dims()

        total_epochs = cfg.search.epochs_per_stage * n_stages
        w_sched = LrSchedule(base_lr=cfg.search.lr,
                             warmup_epochs=cfg.search.warmup_epochs,
                             warmup_start_lr=cfg.search.warmup_start_lr,
                             total_epochs=total_epochs, min_lr=cfg.search.min_lr)

        def layers_for(stage: int) -> int:
            return cfg.search.first_layers + (stage - 1) * cfg.search.layer_increment

        start_stage = 1
        global_epoch = 0
        if resume is not None:
            arrays, extras = load_checkpoint(resume)
            candidates = [OpSpec.from_json(d) for d in extras["candidates"]]
            stage_done = int(extras["stage"])
            global_epoch = int(extras["global_epoch"])
            model = Supernet(dims, candidates, int(extras["layers"]),
                             rng_for(seed, RNG_STAGE, stage_done),
                             lam=cfg.selector.lam, grad_mode=cfg.selector.grad_mode,
                             shared_alpha=cfg.search.shared_alpha,
                             pre_norm=cfg.model.pre_norm,
                             final_norm=cfg.model.final_norm,
                             alpha_init_std=cfg.search.alpha_init_std)
            named = dict(model.weight_parameters())
            named["alpha.logits"] = model.alpha.logits
            for name, p in named.items():
                p.data = arrays[name].astype(p.data.dtype).copy()
            start_stage = stage_done + 1
            if start_stage > n_stages:
                raise ConfigError("resume: checkpoint already covers every stage")
        else:
            model = Supernet(dims, list(cfg.candidates), layers_for(1),
                             rng_for(seed, RNG_STAGE, 1),
                             lam=cfg.selector.lam, grad_mode=cfg.selector.grad_mode,
                             shared_alpha=cfg.search.shared_alpha,
                             pre_norm=cfg.model.pre_norm,
                             final_norm=cfg.model.final_norm,
                             alpha_init_std=cfg.search.alpha_init_std)

        history_path = out / "alpha_history.csv"
        log_path = out / "search_log.jsonl"
        fresh_history = not history_path.exists() or history_path.stat().st_size == 0
        history_fh = open(history_path, "a", newline="")
        history = csv.writer(history_fh)
        if fresh_history:
            history.writerow(["epoch", "layer", "edge", "candidate", "logit",
                              "softmax_weight"])
        log_fh = open(log_path, "a")

        w_opt, a_opt = _build_optimizers(model, cfg)
        state = SearchState(model=model, alpha=model.alpha, w_opt=w_opt,
                            a_opt=a_opt, fairness=cfg.fairness,
                            unrolled=cfg.search.unrolled, xi=cfg.search.xi)
        schedule: list[tuple[int, int]] = []

        try:
            for stage in range(start_stage, n_stages + 1):
                if stage > 1:
                    survivors = prune_candidates(model.alpha,
                                                 cfg.search.prune_per_stage[stage - 2],
                                                 cfg.search.score_mode)
                    model = advance_stage(model, survivors, layers_for(stage),
                                          cfg, seed, stage)
                    w_opt, a_opt = _build_optimizers(model, cfg)
                    state.model, state.alpha = model, model.alpha
                    state.w_opt, state.a_opt = w_opt, a_opt
                state.stage = stage
                schedule.append((len(model.candidates), model.num_layers))
                for _ in range(cfg.search.epochs_per_stage):
                    state.epoch = global_epoch
                    lr = w_sched.lr_at(global_epoch)
                    train_b = epoch_batches(train_ds, split.train_indices, plan,
                                            global_epoch, "train", stats)
                    val_b = epoch_batches(train_ds, split.val_indices, plan,
                                          global_epoch, "val", stats)
                    mark = len(state.log)
                    bilevel_epoch(state, train_b, val_b, lr=lr)
                    for entry in state.log[mark:]:
                        log_fh.write(json.dumps(entry.to_json(), sort_keys=True) + "\n")
                    _write_alpha_rows(history, global_epoch, model)
                    history_fh.flush()
                    log_fh.flush()
                    global_epoch += 1
                arrays = model.named_arrays()
                extras = {
                    "kind": "search-stage",
                    "stage": stage,
                    "layers": model.num_layers,
                    "global_epoch": global_epoch,
                    "seed": seed,
                    "candidates": [s.to_json() for s in model.candidates],
                }
                save_checkpoint(out / f"stage_{stage}.ckpt", arrays, extras)
        except NonFiniteError as exc:
            dump = _dump_diagnostics(out, state, exc)
            history_fh.close()
            log_fh.close()
            raise SearchAbort(
                f"search aborted on non-finite loss at stage {state.stage} "
                f"epoch {state.epoch}; diagnostics at {dump}", dump) from exc

        history_fh.close()
        log_fh.close()

        genotype = derive_genotype(model.alpha, dims, depth=model.num_layers)
        genotype_path = out / "genotype.json"
        save_genotype(genotype, genotype_path)
        return SearchResult(genotype=genotype, out_dir=out, schedule=schedule,
                            state=state, genotype_path=genotype_path,
                            history_path=history_path, log_path=log_path)


# -- retraining ---------------------------------------------------------------------


def retrain(genotype: Genotype, cfg: RunConfig, out_dir, seed: int | None = None,
            resume=None) -> tuple[DerivedModel, list[dict]]:
    """Train the derived model from scratch (or resume) with warmup+cosine AdamW.

    Token selection is not used; every token participates. Writes metrics.csv
    and model.ckpt under `out_dir`.
    """
    cfg = replace(cfg, seed=cfg.seed if seed is None else int(seed)).validate()
    seed = cfg.seed
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")

    with dtype_scope(cfg.model.precision):
        train_ds, test_ds = build_datasets(cfg, seed)
        if train_ds.classes != genotype.dims.classes:
            raise ConfigError(
                f"retrain: dataset has {train_ds.classes} classes but genotype "
                f"expects {genotype.dims.classes}")
        stats = _norm_stats(cfg)
        model = DerivedModel(genotype, rng_for(seed, RNG_RETRAIN),
                             pre_norm=cfg.model.pre_norm,
                             final_norm=cfg.model.final_norm)
        params = model.named_parameters()
        opt = AdamW(params, lr=cfg.retrain.lr, weight_decay=cfg.retrain.weight_decay)
        sched = LrSchedule(base_lr=cfg.retrain.lr,
                           warmup_epochs=cfg.retrain.warmup_epochs,
                           warmup_start_lr=cfg.retrain.warmup_start_lr,
                           total_epochs=cfg.retrain.epochs, min_lr=cfg.retrain.min_lr)
        plan = BatchPlan(batch_size=cfg.retrain.batch_size, seed=seed,
                         drop_last=cfg.retrain.drop_last)

        start_epoch = 0
        if resume is not None:
            arrays, extras = load_checkpoint(resume)
            if extras.get("kind") != "retrain":
                raise ConfigError("resume: not a retraining checkpoint")
            if extras.get("genotype") != genotype_to_json(genotype):
                raise ConfigError("resume: checkpoint genotype differs from the "
                                  "requested genotype")
            for name, p in params.items():
                p.data = arrays[name].astype(p.data.dtype).copy()
            opt.load_state_arrays(arrays)
            start_epoch = int(extras["epoch"]) + 1

        def checkpoint(epoch: int, name: str = "model.ckpt"):
            arrays = model.named_arrays()
            arrays.update(opt.state_arrays())
            save_checkpoint(out / name, arrays, extras={
                "kind": "retrain", "epoch": epoch, "seed": seed,
                "genotype": genotype_to_json(genotype),
            })

        history: list[dict] = []
        def run_epoch(epoch: int, metrics: MetricsWriter):
            opt.set_lr(sched.lr_at(epoch))
            loss_sum, t1_sum, t5_sum, count = 0.0, 0.0, 0.0, 0
            try:
                for batch in epoch_batches(train_ds, np.arange(len(train_ds)),
                                           plan, epoch, "train", stats):
                    logits = model.forward(batch.images)
                    loss = cross_entropy(logits, batch.labels)
                    opt.zero_grad()
                    backward(loss)
                    opt.step()
                    n = len(batch.labels)
                    loss_sum += float(loss.data) * n
                    t1_sum += topk_accuracy(logits.data, batch.labels, 1) * n
                    t5_sum += topk_accuracy(logits.data, batch.labels, 5) * n
                    count += n
            except NonFiniteError as exc:
                checkpoint(epoch)
                raise SearchAbort(
                    f"retraining aborted on non-finite loss at epoch {epoch}; "
                    f"checkpoint written to {out / 'model.ckpt'}") from exc
            row = {"epoch": epoch, "split": "train", "loss": loss_sum / count,
                   "top1": t1_sum / count, "top5": t5_sum / count,
                   "lr": opt.lr}
            metrics.write(epoch, "train", row["loss"], row["top1"], row["top5"])
            history.append(row)
            if cfg.retrain.eval_every and (epoch + 1) % cfg.retrain.eval_every == 0:
                ev = evaluate(model, test_ds, cfg.retrain.batch_size, stats)
                metrics.write(epoch, "test", ev["loss"], ev["top1"], ev["top5"])
            if cfg.retrain.checkpoint_every and \
                    (epoch + 1) % cfg.retrain.checkpoint_every == 0:
                checkpoint(epoch, name=f"epoch_{epoch}.ckpt")

        with MetricsWriter(out / "metrics.csv") as metrics:
            for epoch in range(start_epoch, cfg.retrain.epochs):
                run_epoch(epoch, metrics)
        checkpoint(cfg.retrain.epochs - 1)
        return model, history
