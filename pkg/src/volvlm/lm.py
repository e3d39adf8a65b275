"""Word-level vocabulary, a small decoder-only LM with an image-token prefix,
LoRA adapters, two-stage supervised fine-tuning and greedy decoding.

Sequence layout for one sample::

    [image prefix (M)] <bos> prompt... answer... <eos>

Attention is causal over the whole sequence. The loss covers answer tokens
and <eos> only.
"""
from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from . import tensor as T
from .mae import ConfigError, TokenBatch
from .optim import Adam
from .tensor import Tensor

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
_NEG = -1e9


class SequenceTooLong(ValueError):
    pass


class SampleError(RuntimeError):
    """A training sample could not be loaded; carries the sample id."""

    def __init__(self, sample_id, reason):
        super().__init__(f"sample {sample_id}: {reason}")
        self.sample_id = sample_id


# --------------------------------------------------------------------------
# vocabulary
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Vocab:
    words: tuple  # index = id; first four are the specials

    def __post_init__(self):
        if tuple(self.words[:4]) != SPECIALS:
            raise ValueError("vocab must start with <pad>, <bos>, <eos>, <unk>")
        object.__setattr__(self, "_ids", {w: i for i, w in enumerate(self.words)})

    def __len__(self):
        return len(self.words)

    def id(self, word) -> int:
        return self._ids.get(word, UNK)

    def encode(self, text: str, bos=True, eos=False):
        """Lowercased whitespace tokens -> ids; <bos> prepended by default."""
        ids = [self.id(w) for w in text.lower().split()]
        return ([BOS] if bos else []) + ids + ([EOS] if eos else [])

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.words[i])
        return " ".join(out)

    @property
    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.words).encode("utf-8")).hexdigest()[:16]


def build_vocab(corpus, min_count=1) -> Vocab:
    """Words ordered by frequency (descending) then lexicographically.

    Words seen fewer than ``min_count`` times are left out and encode to <unk>.
    """
    counts = Counter()
    n = 0
    for text in corpus:
        counts.update(text.lower().split())
        n += 1
    if n == 0 or not counts:
        raise ValueError("build_vocab: empty corpus")
    words = [w for w, c in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
             if c >= min_count and w not in SPECIALS]
    return Vocab(SPECIALS + tuple(words))


# --------------------------------------------------------------------------
# configs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LMConfig:
    d_model: int = 64
    layers: int = 2
    heads: int = 4
    max_seq_len: int = 768
    ff: int = 4

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigError(f"lm.d_model {self.d_model} not divisible by lm.heads {self.heads}")

    def check_prefix(self, prefix_len):
        if self.max_seq_len < prefix_len + 2:
            raise ConfigError(f"lm.max_seq_len {self.max_seq_len} < image prefix {prefix_len} + 2")


@dataclass(frozen=True)
class LoRAConfig:
    r: int = 16
    alpha: float = 32.0
    dropout: float = 0.1
    targets: tuple = ("q", "v")

    def __post_init__(self):
        if self.r < 1:
            raise ConfigError(f"lora.r must be >= 1, got {self.r}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"lora.dropout must be in [0, 1), got {self.dropout}")

    @property
    def scaling(self):
        return self.alpha / self.r


@dataclass(frozen=True)
class SftStage:
    stage: int = 1
    lr: float = 1e-4
    epochs: int = 1
    batch_size: int = 8
    seed: int = 0
    error_budget: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


_MASKS: dict = {}


def causal_mask(S, dtype=np.float32):
    key = (S, np.dtype(dtype).str)
    if key not in _MASKS:
        _MASKS[key] = np.triu(np.full((S, S), _NEG, dtype=dtype), k=1)
    return _MASKS[key]


class DecoderLM(nn.Module):
    def __init__(self, cfg: LMConfig, vocab_size: int, seed=0, dtype=np.float32):
        rng = T.make_rng(seed, 606)
        d = cfg.d_model
        self.tok_emb = Tensor(rng.normal(0, 0.02, size=(vocab_size, d)).astype(dtype), requires_grad=True)
        self.pos_emb = Tensor(rng.normal(0, 0.02, size=(cfg.max_seq_len, d)).astype(dtype), requires_grad=True)
        self.blocks = [nn.Block(d, cfg.heads, rng, cfg.ff, dtype) for _ in range(cfg.layers)]
        self.norm = nn.LayerNorm(d, dtype)
        self.head = nn.Linear(d, vocab_size, rng, bias=False, dtype=dtype)
        # small output head: near-uniform next-token distribution at init
        self.head.weight.data = rng.normal(0, 0.02, size=(d, vocab_size)).astype(dtype)
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.dtype = dtype

    def forward(self, prefix, ids):
        """``prefix`` (B, M, d) or None, ``ids`` (B, L) -> logits (B, L, V).

        ``logits[:, t]`` is the distribution of the token after ``ids[:, t]``.
        """
        ids = np.asarray(ids, dtype=np.int64)
        B, L = ids.shape
        x = T.embedding(self.tok_emb, ids)
        M = 0
        if prefix is not None:
            M = prefix.shape[1]
            x = T.concat([T.as_tensor(prefix), x], axis=1)
        S = M + L
        if S > self.cfg.max_seq_len:
            raise SequenceTooLong(f"sequence of {S} tokens exceeds max_seq_len {self.cfg.max_seq_len}")
        x = x + self.pos_emb[:S]
        mask = causal_mask(S, self.dtype)
        for blk in self.blocks:
            x = blk(x, mask=mask)
        h = self.norm(x[:, M:])
        return self.head(h)


def lora_apply(lm: DecoderLM, cfg: LoRAConfig, rng):
    """Wrap the targeted attention maps of every block in LoRA adapters.

    Base weights are frozen; only the new A/B factors require gradients.
    Returns the list of adapters.
    """
    lm.requires_grad_(False)
    adapters = []
    for blk in lm.blocks:
        for name in cfg.targets:
            base = getattr(blk.attn, name)
            if isinstance(base, nn.LoRALinear):
                raise ValueError(f"LoRA already applied to attn.{name}")
            ad = nn.LoRALinear(base, cfg.r, cfg.alpha, cfg.dropout, rng)
            setattr(blk.attn, name, ad)
            adapters.append(ad)
    return adapters


def lora_adapters(module):
    return [m for m in module.modules() if isinstance(m, nn.LoRALinear)]


def lora_param_names(module):
    return [n for n, _ in module.named_parameters() if n.rsplit(".", 1)[-1] in ("lora_A", "lora_B")]


# --------------------------------------------------------------------------
# batches and loss
# --------------------------------------------------------------------------


@dataclass
class TextBatch:
    ids: np.ndarray      # (B, L) right-padded
    targets: np.ndarray  # (B, L) next-token ids (PAD where undefined)
    weights: np.ndarray  # (B, L) 1 where the target is an answer token or <eos>


def make_text_batch(prompt_ids, answer_ids, prefix_len, max_seq_len, sample_ids=None) -> TextBatch:
    """Assemble ``<bos> prompt answer <eos>`` rows; ``prompt_ids``/``answer_ids``
    exclude the special tokens."""
    rows, spans = [], []
    for i, (p, a) in enumerate(zip(prompt_ids, answer_ids)):
        tag = sample_ids[i] if sample_ids is not None else i
        if len(a) == 0:
            raise ValueError(f"sample {tag}: empty answer, nothing to supervise")
        row = [BOS] + list(p) + list(a) + [EOS]
        if prefix_len + len(row) > max_seq_len:
            raise SequenceTooLong(f"sample {tag}: {prefix_len} image + {len(row)} text tokens "
                                  f"exceed max_seq_len {max_seq_len}")
        rows.append(row)
        spans.append(1 + len(p))  # index of the first answer token
    L = max(len(r) for r in rows)
    B = len(rows)
    ids = np.full((B, L), PAD, dtype=np.int64)
    targets = np.full((B, L), PAD, dtype=np.int64)
    weights = np.zeros((B, L), dtype=np.float64)
    for b, (row, s) in enumerate(zip(rows, spans)):
        ids[b, :len(row)] = row
        targets[b, :len(row) - 1] = row[1:]
        weights[b, s - 1:len(row) - 1] = 1.0
    return TextBatch(ids, targets, weights)


def lm_forward(lm: DecoderLM, image_tokens, prompt_ids, answer_ids):
    """Returns (logits (B, L, V), mean answer-token cross-entropy)."""
    M = 0 if image_tokens is None else image_tokens.shape[1]
    batch = make_text_batch(prompt_ids, answer_ids, M, lm.cfg.max_seq_len)
    logits = lm(image_tokens, batch.ids)
    return logits, T.cross_entropy(logits, batch.targets, batch.weights)


# --------------------------------------------------------------------------
# vision-language wrapper
# --------------------------------------------------------------------------


class VisionLanguageModel(nn.Module):
    """Perceiver + decoder LM. Encoder features come in precomputed (the
    encoder is frozen throughout fine-tuning)."""

    def __init__(self, perceiver, lm: DecoderLM):
        self.perceiver = perceiver
        self.lm = lm

    def prefix(self, features: TokenBatch):
        return self.perceiver(features).values

    def forward(self, features: TokenBatch, prompt_ids, answer_ids):
        return lm_forward(self.lm, self.prefix(features), prompt_ids, answer_ids)


def set_stage(vlm: VisionLanguageModel, stage: int):
    """Apply the stage's freeze policy and return its trainable parameters.

    Stage 1 trains the perceiver; stage 2 trains the perceiver and LoRA.
    The base LM is frozen in both.
    """
    vlm.lm.requires_grad_(False)
    vlm.perceiver.requires_grad_(True)
    names = set()
    if stage == 2:
        adapters = lora_adapters(vlm.lm)
        if not adapters:
            raise ConfigError("stage 2 needs LoRA adapters on the language model")
        for ad in adapters:
            ad.lora_A.requires_grad = True
            ad.lora_B.requires_grad = True
    trainable = [(n, p) for n, p in vlm.named_parameters() if p.requires_grad]
    names = {n for n, _ in trainable}
    return [p for _, p in trainable], names


def _fingerprint(arrays):
    h = hashlib.sha256()
    for name, arr in arrays:
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def frozen_fingerprint(module, trainable_names):
    return _fingerprint((n, p.data) for n, p in module.named_parameters() if n not in trainable_names)


def _encode_samples(samples, vocab: Vocab):
    prompts = [vocab.encode(s.question, bos=False) for s in samples]
    answers = [vocab.encode(s.answer, bos=False) for s in samples]
    return prompts, answers


def sft_loop(vlm: VisionLanguageModel, samples, features_for, vocab: Vocab, stage: SftStage, on_step=None):
    """Supervised fine-tuning of one stage.

    ``features_for(sample)`` returns the (N, C) encoder features and grid as
    a TokenBatch with B=1; failures become per-sample errors and training
    aborts once more than ``stage.error_budget`` samples fail. Returns a
    summary dict with per-step losses and the frozen-set fingerprints taken
    before and after the run.
    """
    params, names = set_stage(vlm, stage.stage)
    before = frozen_fingerprint(vlm, names)
    opt = Adam(params, lr=stage.lr, weight_decay=stage.weight_decay)
    vlm.train()
    history, errors = [], []
    step = 0
    for epoch in range(stage.epochs):
        order = T.make_rng(stage.seed, 505, stage.stage, epoch).permutation(len(samples))
        for start in range(0, len(order), stage.batch_size):
            batch = [samples[i] for i in order[start:start + stage.batch_size]]
            feats, ok = [], []
            for s in batch:
                try:
                    feats.append(features_for(s))
                    ok.append(s)
                except (OSError, ValueError) as exc:
                    err = SampleError(s.id, exc)
                    errors.append(str(err))
                    log.warning("%s", err)
                    if len(errors) > stage.error_budget:
                        raise err from exc
            if not ok:
                continue
            fb = TokenBatch(np.concatenate([f.values for f in feats]), feats[0].grid)
            prompts, answers = _encode_samples(ok, vocab)
            opt.zero_grad()
            _, loss = vlm(fb, prompts, answers)
            T.backward(loss, params)
            opt.step()
            rec = {"stage": stage.stage, "epoch": epoch, "step": step, "loss": float(loss.data), "lr": opt.lr}
            if not np.isfinite(rec["loss"]):
                raise FloatingPointError(f"non-finite loss at step {step}")
            history.append(rec)
            if on_step is not None:
                on_step(rec)
            step += 1
        opt.end_epoch()
    vlm.eval()
    after = frozen_fingerprint(vlm, names)
    if before != after:
        raise AssertionError("frozen parameters changed during fine-tuning")
    return {"history": history, "errors": errors, "frozen_before": before, "frozen_after": after,
            "trainable": sorted(names)}


# --------------------------------------------------------------------------
# text-only warm start of the base LM
# --------------------------------------------------------------------------


def fact_prefix(lm: DecoderLM, facts, prefix_len, gain=None):
    """Prefix built from text facts: ``facts[b]`` is a list of ``(slot, word_ids)``;
    each listed slot holds the sum of those words' embeddings, other slots are zero."""
    B = len(facts)
    K = max([len(w) for f in facts for _, w in f] + [1])
    ids = np.zeros((B, prefix_len, K), dtype=np.int64)
    keep = np.zeros((B, prefix_len, K, 1), dtype=lm.dtype)
    for b, f in enumerate(facts):
        for slot, words in f:
            ids[b, slot, :len(words)] = words
            keep[b, slot, :len(words)] = 1.0 if gain is None else gain[b, slot]
    return T.sum_(T.embedding(lm.tok_emb, ids) * keep, axis=2)


def pretrain_lm(lm: DecoderLM, items, vocab: Vocab, prefix_len, facts_for, epochs=1, lr=1e-3,
                batch_size=16, seed=0, noise=0.0, scale=(1.0, 1.0), on_step=None):
    """Text-only warm start on ``(context, prompt, answer)`` items.

    ``facts_for(context, rng)`` turns the context text into prefix facts (see
    :func:`fact_prefix`), placed in the slots that image tokens occupy later,
    so the model learns to answer from what the prefix carries. No images
    are involved. Each fact is scaled by a factor drawn from ``scale`` and
    every slot gets gaussian ``noise``, so the LM does not depend on an exact
    prefix format a projector could never hit.
    """
    params = lm.parameters()
    lm.requires_grad_(True)
    opt = Adam(params, lr=lr)
    lm.train()
    prompts = [vocab.encode(p, bos=False) for _, p, _ in items]
    answers = [vocab.encode(a, bos=False) for _, _, a in items]
    history = []
    step = 0
    for epoch in range(epochs):
        rng = T.make_rng(seed, 707, epoch)
        order = rng.permutation(len(items))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            facts = [facts_for(items[i][0], rng) for i in idx]
            prefix = fact_prefix(lm, facts, prefix_len, rng.uniform(*scale, size=(len(idx), prefix_len)))
            if noise:
                prefix = prefix + rng.normal(0.0, noise, size=prefix.shape).astype(lm.dtype)
            _, loss = lm_forward(lm, prefix, [prompts[i] for i in idx], [answers[i] for i in idx])
            T.backward(loss, params)
            opt.step()
            rec = {"epoch": epoch, "step": step, "loss": float(loss.data), "lr": opt.lr}
            history.append(rec)
            if on_step is not None:
                on_step(rec)
            step += 1
        opt.end_epoch()
    lm.eval()
    lm.requires_grad_(False)
    return history


# --------------------------------------------------------------------------
# decoding
# --------------------------------------------------------------------------


def generate(vlm: VisionLanguageModel, features: TokenBatch, prompt: str, vocab: Vocab, max_new_tokens=64):
    """Greedy decoding until <eos> or ``max_new_tokens``; ties go to the lowest id."""
    with T.no_grad():
        prefix = vlm.perceiver(features).values if features is not None else None
        return _greedy(vlm.lm, prefix, vocab.encode(prompt), vocab, max_new_tokens)


def _greedy(lm: DecoderLM, prefix, ids, vocab, max_new_tokens):
    M = 0 if prefix is None else prefix.shape[1]
    out = []
    ids = list(ids)
    for _ in range(max_new_tokens):
        if M + len(ids) > lm.cfg.max_seq_len:
            break
        logits = lm(prefix, np.asarray([ids]))
        nxt = int(np.argmax(logits.data[0, -1]))
        if nxt == EOS:
            break
        out.append(nxt)
        ids.append(nxt)
    return vocab.decode(out)


def config_dict(obj):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(obj).items()}
