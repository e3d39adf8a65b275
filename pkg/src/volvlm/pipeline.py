"""End-to-end steps shared by the CLI and the tests: MAE pretraining, base-LM
warm start, SFT stages, generation, evaluation and the perceiver ablation."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, load_into, save_checkpoint
from .config import RunConfig
from .lm import (DecoderLM, config_dict, SftStage, VisionLanguageModel, Vocab, build_vocab, generate, lora_apply,
                 pretrain_lm, sft_loop)
from .mae import MaskedAutoencoder3D, PatchGrid, TokenBatch, pretrain_loop
from .metrics import classification_metrics, confusion, parse_diagnosis_answer, text_metrics
from .perceiver import KINDS, PerceiverSpec, build_perceiver, check_grid
from .phantom import SchemaError, parse_report, read_jsonl
from .volume import VolumeFormatError, preprocess, read_rvol

log = logging.getLogger(__name__)


class DataError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# data access
# --------------------------------------------------------------------------


def load_split(data_dir, split):
    path = Path(data_dir) / f"{split}.jsonl"
    if not path.is_file():
        raise DataError(f"missing {split} split: {path}")
    try:
        return read_jsonl(path)
    except SchemaError as exc:
        raise DataError(f"{path}: {exc}") from exc


def load_grid(data_dir, rel_path, cfg: RunConfig):
    return preprocess(read_rvol(Path(data_dir) / rel_path), cfg.preprocess, dtype=np.float32)


def volume_paths(samples):
    seen = {}
    for s in samples:
        seen.setdefault(s.volume_path, None)
    return list(seen)


def load_grids(data_dir, rel_paths, cfg: RunConfig):
    try:
        return np.stack([load_grid(data_dir, p, cfg) for p in rel_paths])
    except (OSError, VolumeFormatError) as exc:
        raise DataError(str(exc)) from exc


@dataclass(frozen=True)
class FeatureNorm:
    """Removes the per token-position mean of encoder features and divides by
    one global scale.

    Every phantom shares the same body, so raw features are dominated by a
    position-dependent constant; subtracting it leaves what differs between
    volumes. A single scale (not per position) keeps positions that hardly
    vary, like the air around the body, from being blown up to unit variance.
    Statistics come from the training volumes only.
    """

    mean: np.ndarray  # (1, N, C)
    scale: np.ndarray  # (1, 1, 1)

    @classmethod
    def fit(cls, values, eps=1e-6):
        values = np.asarray(values, dtype=np.float64)
        mean = values.mean(0, keepdims=True)
        scale = np.sqrt(((values - mean) ** 2).mean()) + eps
        return cls(mean.astype(np.float32), np.full((1, 1, 1), scale, dtype=np.float32))

    def __call__(self, values):
        return ((values - self.mean) / self.scale).astype(np.float32)


class FeatureCache:
    """Encoder features per volume, computed once. The encoder is frozen
    during fine-tuning so caching does not change any result. Features are
    returned standardized once ``norm`` is set."""

    def __init__(self, encoder: MaskedAutoencoder3D, data_dir, cfg: RunConfig, norm: FeatureNorm | None = None):
        self.encoder, self.data_dir, self.cfg = encoder, data_dir, cfg
        self.norm = norm
        self._cache = {}

    def warm(self, rel_paths, batch_size=16):
        todo = [p for p in rel_paths if p not in self._cache]
        for i in range(0, len(todo), batch_size):
            chunk, grids = [], []
            for p in todo[i:i + batch_size]:
                try:
                    grids.append(load_grid(self.data_dir, p, self.cfg))
                    chunk.append(p)
                except (OSError, VolumeFormatError):
                    continue  # reported per sample on access
            if not chunk:
                continue
            with T.no_grad():
                tb = self.encoder.encode(np.stack(grids))
            vals = tb.values.data
            for j, p in enumerate(chunk):
                self._cache[p] = TokenBatch(vals[j:j + 1].copy(), tb.grid)

    def fit_norm(self, rel_paths):
        self.warm(rel_paths)
        have = [p for p in rel_paths if p in self._cache]
        if not have:
            raise DataError("no readable training volumes to fit feature statistics on")
        self.norm = FeatureNorm.fit(np.concatenate([self._cache[p].values for p in have]))
        return self.norm

    def __call__(self, sample):
        p = sample.volume_path
        if p not in self._cache:
            grid = load_grid(self.data_dir, p, self.cfg)  # raises OSError / VolumeFormatError
            with T.no_grad():
                tb = self.encoder.encode(grid[None])
            self._cache[p] = TokenBatch(tb.values.data.copy(), tb.grid)
        tb = self._cache[p]
        return tb if self.norm is None else TokenBatch(self.norm(tb.values), tb.grid)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def _prefixed(module, prefix):
    return {prefix + n: a for n, a in module.state_dict().items()}


def _stamp(cfg: RunConfig, **extra):
    return {"config": cfg.to_dict(), "config_hash": cfg.hash, "seed": cfg.train.seed, **extra}


def save_mae(path, model: MaskedAutoencoder3D, cfg: RunConfig, history=None):
    meta = _stamp(cfg, kind="mae", vit=cfg.vit.to_dict())
    if history:
        meta["final_loss"] = history[-1]["loss"]
    save_checkpoint(path, _prefixed(model, ""), meta)


def load_encoder(path, cfg: RunConfig) -> MaskedAutoencoder3D:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") not in ("mae", "vlm"):
        raise CheckpointError(f"{path}: not an encoder-bearing checkpoint (kind={meta.get('kind')!r})")
    model = MaskedAutoencoder3D(cfg.vit, seed=cfg.train.seed)
    if meta["kind"] == "mae":
        load_into(model, tensors, "", strict=True)
    else:
        load_into(model, tensors, "encoder.", strict=False)
    model.eval()
    return model


def save_lm(path, lm: DecoderLM, vocab: Vocab, cfg: RunConfig, history=None):
    meta = _stamp(cfg, kind="lm", vocab=list(vocab.words), vocab_hash=vocab.hash)
    if history:
        meta["final_loss"] = history[-1]["loss"]
    save_checkpoint(path, _prefixed(lm, ""), meta)


def load_lm(path, cfg: RunConfig):
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "lm":
        raise CheckpointError(f"{path}: not a base-LM checkpoint (kind={meta.get('kind')!r})")
    vocab = _vocab_from_meta(meta, path)
    lm = DecoderLM(cfg.lm, len(vocab), seed=cfg.train.seed)
    load_into(lm, tensors, "", strict=True)
    lm.eval()
    lm.requires_grad_(False)
    return lm, vocab


def _vocab_from_meta(meta, path):
    try:
        vocab = Vocab(tuple(meta["vocab"]))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: missing or invalid vocabulary") from exc
    if vocab.hash != meta.get("vocab_hash"):
        raise CheckpointError(f"{path}: vocab hash mismatch ({vocab.hash} vs stored {meta.get('vocab_hash')})")
    return vocab


def save_vlm(path, encoder, vlm: VisionLanguageModel, vocab: Vocab, cfg: RunConfig, stage, norm: FeatureNorm,
             summary=None):
    tensors = {"feature_norm.mean": norm.mean, "feature_norm.scale": norm.scale}
    enc_names = {n for n, _ in encoder.named_parameters() if n.split(".")[0] in ("patch_embed", "blocks", "norm")}
    tensors.update({"encoder." + n: a for n, a in encoder.state_dict().items() if n in enc_names})
    tensors.update(_prefixed(vlm.perceiver, "perceiver."))
    tensors.update(_prefixed(vlm.lm, "lm."))
    meta = _stamp(cfg, kind="vlm", stage=stage, perceiver=cfg.perceiver.to_dict(),
                  lora=config_dict(cfg.lora) if stage == 2 else None,
                  vocab=list(vocab.words), vocab_hash=vocab.hash)
    if summary:
        meta["final_loss"] = summary["history"][-1]["loss"] if summary["history"] else None
        meta["frozen_fingerprint"] = summary["frozen_after"]
        meta["skipped_samples"] = len(summary["errors"])
    save_checkpoint(path, tensors, meta)


def load_vlm(path, cfg: RunConfig, expect_vocab_hash=None):
    """(encoder, vlm, vocab, norm, meta) from a stage checkpoint, checked against ``cfg``."""
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "vlm":
        raise CheckpointError(f"{path}: not a fine-tuned model checkpoint (kind={meta.get('kind')!r})")
    vocab = _vocab_from_meta(meta, path)
    if expect_vocab_hash is not None and vocab.hash != expect_vocab_hash:
        raise CheckpointError(f"{path}: vocab hash {vocab.hash} does not match expected {expect_vocab_hash}")
    spec = PerceiverSpec(**meta["perceiver"])
    if spec != cfg.perceiver:
        raise CheckpointError(f"{path}: perceiver {spec} does not match config {cfg.perceiver}")
    encoder = MaskedAutoencoder3D(cfg.vit, seed=cfg.train.seed)
    load_into(encoder, tensors, "encoder.", strict=False)
    encoder.eval()
    lm = DecoderLM(cfg.lm, len(vocab), seed=cfg.train.seed)
    if meta["stage"] == 2:
        lora_apply(lm, cfg.lora, T.make_rng(cfg.train.seed, 808))
    perceiver = build_perceiver(spec, cfg.vit.embed_dim, cfg.vit.grid, seed=cfg.train.seed)
    vlm = VisionLanguageModel(perceiver, lm)
    load_into(vlm.perceiver, tensors, "perceiver.", strict=True)
    load_into(vlm.lm, tensors, "lm.", strict=True)
    vlm.eval()
    vlm.requires_grad_(False)
    try:
        norm = FeatureNorm(tensors["feature_norm.mean"], tensors["feature_norm.scale"])
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing feature statistics") from exc
    return encoder, vlm, vocab, norm, meta


# --------------------------------------------------------------------------
# steps
# --------------------------------------------------------------------------


def run_pretrain_mae(cfg: RunConfig, data_dir, on_step=None):
    samples = load_split(data_dir, "train")
    grids = load_grids(data_dir, volume_paths(samples), cfg)
    model = MaskedAutoencoder3D(cfg.vit, seed=cfg.train.seed)
    hist = pretrain_loop(model, grids, cfg.train.mae_steps, lr=cfg.train.mae_lr,
                         batch_size=cfg.train.batch_size, decay=cfg.train.mae_decay,
                         seed=cfg.train.seed, on_step=on_step)
    model.eval()
    return model, hist


def text_triples(samples):
    """(context, question, answer) with the patient's report as context."""
    reports = {s.patient_id: s.answer for s in samples if s.task == "report"}
    return [(reports.get(s.patient_id, ""), s.question, s.answer) for s in samples]


def region_slots(grid: PatchGrid):
    """Prefix slots (reduced-grid order) falling in each named octant."""
    H, W, D = grid.dims
    out = {}
    for m in range(grid.n_tokens):
        i, j, k = m // (W * D), (m // D) % W, m % D
        name = " ".join(("anterior" if j < W / 2 else "posterior",
                         "upper" if k >= D / 2 else "lower",
                         "left" if i < H / 2 else "right"))
        out.setdefault(name, []).append(m)
    return out


class ReportFacts:
    """Report text -> prefix facts: one slot per finding, inside the octant the
    report names, holding the lesion-type and diameter words."""

    def __init__(self, vocab: Vocab, grid: PatchGrid):
        self.vocab = vocab
        self.slots = region_slots(grid)

    def __call__(self, report, rng):
        facts, used = [], set()
        for t, d, region in parse_report(report):
            free = [m for m in self.slots.get(region, ()) if m not in used]
            if not free:
                continue
            m = free[int(rng.integers(len(free)))]
            used.add(m)
            facts.append((m, [self.vocab.id(t), self.vocab.id(str(d))]))
        return facts


def run_pretrain_lm(cfg: RunConfig, data_dir, on_step=None):
    samples = load_split(data_dir, "train")
    vocab = build_vocab(t for s in samples for t in (s.question, s.answer))
    lm = DecoderLM(cfg.lm, len(vocab), seed=cfg.train.seed)
    grid = check_grid(cfg.vit.grid, cfg.perceiver.k)
    hist = pretrain_lm(lm, text_triples(samples), vocab, cfg.prefix_len, ReportFacts(vocab, grid),
                       epochs=cfg.train.lm_epochs, lr=cfg.train.lm_lr, batch_size=cfg.train.batch_size,
                       seed=cfg.train.seed, noise=cfg.train.lm_noise, scale=cfg.train.lm_scale, on_step=on_step)
    return lm, vocab, hist


def stage_settings(cfg: RunConfig, stage: int) -> SftStage:
    t = cfg.train
    lr, epochs = (t.stage1_lr, t.stage1_epochs) if stage == 1 else (t.stage2_lr, t.stage2_epochs)
    return SftStage(stage=stage, lr=lr, epochs=epochs, batch_size=t.batch_size, seed=t.seed,
                    error_budget=t.error_budget, weight_decay=t.sft_weight_decay)


def run_sft_stage1(cfg: RunConfig, data_dir, encoder, lm, vocab, on_step=None, samples=None, cache=None):
    samples = load_split(data_dir, "train") if samples is None else samples
    if cache is None:
        cache = FeatureCache(encoder, data_dir, cfg)
    if cache.norm is None:
        cache.fit_norm(volume_paths(samples))
    perceiver = build_perceiver(cfg.perceiver, cfg.vit.embed_dim, cfg.vit.grid, seed=cfg.train.seed)
    vlm = VisionLanguageModel(perceiver, lm)
    summary = sft_loop(vlm, samples, cache, vocab, stage_settings(cfg, 1), on_step=on_step)
    return vlm, summary, cache


def run_sft_stage2(cfg: RunConfig, data_dir, encoder, vlm, vocab, on_step=None, samples=None, cache=None,
                   norm: FeatureNorm | None = None):
    """Stage 2 on top of a stage-1 model; ``norm`` (or ``cache.norm``) must be the stage-1 statistics."""
    samples = load_split(data_dir, "train") if samples is None else samples
    if cache is None:
        cache = FeatureCache(encoder, data_dir, cfg, norm)
    if cache.norm is None:
        raise ValueError("stage 2 needs the feature statistics fitted in stage 1")
    cache.warm(volume_paths(samples))
    if not any(True for _ in _lora_modules(vlm)):
        lora_apply(vlm.lm, cfg.lora, T.make_rng(cfg.train.seed, 808))
    summary = sft_loop(vlm, samples, cache, vocab, stage_settings(cfg, 2), on_step=on_step)
    return vlm, summary, cache


def _lora_modules(vlm):
    from .nn import LoRALinear
    return (m for m in vlm.lm.modules() if isinstance(m, LoRALinear))


def predict(vlm, cache: FeatureCache, samples, vocab, max_new_tokens=64):
    vlm.eval()
    out = []
    for s in samples:
        out.append(generate(vlm, cache(s), s.question, vocab, max_new_tokens))
    return out


def evaluate(vlm, cache: FeatureCache, samples, vocab, task, max_new_tokens=64):
    """report.json payload for one task on ``samples``."""
    chosen = [s for s in samples if s.task == task]
    if not chosen:
        raise DataError(f"no samples with task {task!r}")
    preds = predict(vlm, cache, chosen, vocab, max_new_tokens)
    per_sample = []
    if task == "diagnosis":
        labels = [bool(s.label["present"]) for s in chosen]
        parsed = [parse_diagnosis_answer(p) for p in preds]
        bacc, precision, recall, f1 = classification_metrics(parsed, labels)
        cc = confusion(parsed, labels)
        metrics = {"bacc": 100 * bacc, "precision": 100 * precision, "recall": 100 * recall, "f1": 100 * f1}
        counts = {"tp": cc.tp, "fp": cc.fp, "tn": cc.tn, "fn": cc.fn}
        for s, p, q in zip(chosen, preds, parsed):
            per_sample.append({"id": s.id, "disease": s.label["disease"], "present": bool(s.label["present"]),
                               "prediction": q, "text": p})
        return {"task": task, "n": len(chosen), "metrics": metrics, "counts": counts, "per_sample": per_sample}
    rep = text_metrics(preds, [s.answer for s in chosen])
    for s, p, m in zip(chosen, preds, rep.per_sample):
        per_sample.append({"id": s.id, "text": p, "reference": s.answer, **m})
    return {"task": task, "n": rep.n, "metrics": rep.scaled(), "per_sample": per_sample}


def write_report(report, path):
    Path(path).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")


def run_ablation(cfg: RunConfig, data_dir, encoder, lm_state, vocab, kinds=KINDS, tasks=("report", "vqa"),
                 on_step=None, train_samples=None, test_samples=None):
    """Both SFT stages and text-metric evaluation for each perceiver kind.

    Every kind starts from the same encoder and base LM. Returns
    ``{kind: {task: metrics}}`` with metrics on the x100 scale.
    """
    train = load_split(data_dir, "train") if train_samples is None else train_samples
    test = load_split(data_dir, "test") if test_samples is None else test_samples
    cache = FeatureCache(encoder, data_dir, cfg)
    cache.warm(volume_paths(train) + volume_paths(test))
    table = {}
    for kind in kinds:
        kcfg = replace(cfg, perceiver=replace(cfg.perceiver, kind=kind))
        lm = DecoderLM(cfg.lm, len(vocab), seed=cfg.train.seed)
        lm.load_state_dict(lm_state)
        lm.eval()
        vlm, _, _ = run_sft_stage1(kcfg, data_dir, encoder, lm, vocab, on_step=on_step, samples=train, cache=cache)
        vlm, _, _ = run_sft_stage2(kcfg, data_dir, encoder, vlm, vocab, on_step=on_step, samples=train, cache=cache)
        table[kind] = {t: evaluate(vlm, cache, test, vocab, t, cfg.train.max_new_tokens)["metrics"] for t in tasks}
        log.info("ablation %s done", kind)
    return table


def ablation_markdown(table, tasks=("report", "vqa")):
    cols = ("bleu1", "rouge1", "meteor_exact", "token_f1")
    lines = ["| perceiver | task | " + " | ".join(cols) + " |", "|---|---|" + "---|" * len(cols)]
    for kind, per_task in table.items():
        for t in tasks:
            m = per_task[t]
            lines.append(f"| {kind} | {t} | " + " | ".join(f"{m[c]:.2f}" for c in cols) + " |")
    return "\n".join(lines) + "\n"
