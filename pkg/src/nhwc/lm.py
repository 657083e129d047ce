"""Decoder-only transformer predicting speech tokens from text and a reference embedding.

Input sequence per utterance::

    [e_ref] [BOT] text... [EOT] [BOS] speech... [EOS]

The reference embedding is projected into the model width and occupies the
first slot.  Text and speech positions index two separate positional tables,
each restarting from zero at its opening delimiter.  One output head covers
the unified vocabulary (text ids, speech ids, specials); each loss row's
softmax is restricted to the classes of its own segment.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import InvalidInputError, NumericalError, SequenceTooLongError
from .numerics import (
    Adam,
    Tape,
    Tensor,
    add,
    causal_attention,
    cross_entropy_logits,
    dropout,
    embedding,
    gelu,
    getitem,
    layer_norm,
    matmul,
    mul,
    total,
)

log = logging.getLogger(__name__)

REF, TEXT, SPEECH = 0, 1, 2
N_SPECIALS = 5


@dataclass(frozen=True)
class LmConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    text_vocab_size: int = 512
    speech_vocab_size: int = 256
    ref_dim: int = 128
    max_sequence_len: int = 512
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise InvalidInputError("d_model must be divisible by n_heads")
        if min(self.n_layers, self.n_heads, self.text_vocab_size, self.speech_vocab_size) < 1:
            raise InvalidInputError("layer, head and vocabulary sizes must be positive")

    @classmethod
    def large_scale(cls):
        """24 layers x 16 heads x 1024 wide over the 50,257-entry r50k text vocabulary."""
        return cls(n_layers=24, n_heads=16, d_model=1024, text_vocab_size=50257,
                   speech_vocab_size=256, ref_dim=128, max_sequence_len=2048)

    # unified vocabulary: [text | speech | BOT EOT BOS EOS PAD]
    @property
    def bot(self):
        return self.text_vocab_size + self.speech_vocab_size

    @property
    def eot(self):
        return self.bot + 1

    @property
    def bos(self):
        return self.bot + 2

    @property
    def eos(self):
        return self.bot + 3

    @property
    def pad(self):
        return self.bot + 4

    @property
    def vocab_size(self):
        return self.bot + N_SPECIALS

    def speech_id(self, s):
        return self.text_vocab_size + s

    def segment_class(self, token_id):
        """'text', 'speech' or 'special' for any unified id."""
        if 0 <= token_id < self.text_vocab_size:
            return "text"
        if token_id < self.bot:
            return "speech"
        if token_id < self.vocab_size:
            return "special"
        raise InvalidInputError(f"id {token_id} outside unified vocabulary")

    def allowed_classes(self, segment):
        mask = np.zeros(self.vocab_size, dtype=bool)
        if segment == TEXT:
            mask[: self.text_vocab_size] = True
            mask[self.eot] = True
        elif segment == SPEECH:
            mask[self.text_vocab_size : self.bot] = True
            mask[self.eos] = True
        else:
            raise InvalidInputError("only text and speech rows carry a loss")
        return mask

    def parameter_shapes(self):
        d, V, P, R = self.d_model, self.vocab_size, self.max_sequence_len, self.ref_dim
        shapes = {
            "tok_emb": (V, d),
            "pos_text": (P, d),
            "pos_speech": (P, d),
            "ref_proj.w": (R, d),
            "ref_proj.b": (d,),
        }
        for i in range(self.n_layers):
            shapes.update({
                f"h{i}.ln1.g": (d,), f"h{i}.ln1.b": (d,),
                f"h{i}.attn.qkv": (d, 3 * d), f"h{i}.attn.proj": (d, d),
                f"h{i}.ln2.g": (d,), f"h{i}.ln2.b": (d,),
                f"h{i}.mlp.fc": (d, 4 * d), f"h{i}.mlp.proj": (4 * d, d),
            })
        shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "head": (d, V)})
        return shapes

    def parameter_count(self):
        d, V, P, R, L = self.d_model, self.vocab_size, self.max_sequence_len, self.ref_dim, self.n_layers
        return 2 * V * d + 2 * P * d + R * d + d + L * (12 * d * d + 4 * d) + 2 * d


@dataclass
class SequenceLayout:
    tokens: np.ndarray  # unified ids; -1 in the reference slot
    segments: np.ndarray  # REF / TEXT / SPEECH per position
    positions: np.ndarray  # index within the segment; -1 for the reference slot
    targets: np.ndarray  # next token, PAD at the final position
    loss_mask: np.ndarray
    target_segments: np.ndarray  # segment whose classes the target belongs to
    e_ref: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.tokens)

    @property
    def text_loss_rows(self):
        return np.nonzero(self.loss_mask & (self.target_segments == TEXT))[0]

    @property
    def speech_loss_rows(self):
        return np.nonzero(self.loss_mask & (self.target_segments == SPEECH))[0]


def assemble_sequence(text_ids, speech_ids, e_ref, cfg):
    """Lay out one utterance; empty or missing speech gives a generation prompt ending at BOS."""
    text_ids = [int(t) for t in text_ids]
    if any(t < 0 or t >= cfg.text_vocab_size for t in text_ids):
        raise InvalidInputError("text id outside the text vocabulary")
    prompt = speech_ids is None or len(speech_ids) == 0
    speech = [] if prompt else [int(s) for s in speech_ids]
    if any(s < 0 or s >= cfg.speech_vocab_size for s in speech):
        raise InvalidInputError("speech id outside the speech vocabulary")
    e_ref = np.asarray(e_ref, dtype=np.float64).reshape(-1)
    if e_ref.shape != (cfg.ref_dim,):
        raise InvalidInputError(f"reference embedding must have {cfg.ref_dim} entries")

    N, M = len(text_ids), len(speech)
    text_part = [cfg.bot] + text_ids + [cfg.eot]
    speech_part = [cfg.bos] + [cfg.speech_id(s) for s in speech] + ([] if prompt else [cfg.eos])
    length = 1 + len(text_part) + len(speech_part)
    if length > cfg.max_sequence_len:
        raise SequenceTooLongError(length, cfg.max_sequence_len)

    tokens = np.array([-1] + text_part + speech_part, dtype=np.int64)
    segments = np.array([REF] + [TEXT] * (N + 2) + [SPEECH] * len(speech_part), dtype=np.int64)
    positions = np.array([-1] + list(range(N + 2)) + list(range(len(speech_part))), dtype=np.int64)
    targets = np.append(tokens[1:], cfg.pad)
    target_segments = np.full(length, REF, dtype=np.int64)
    loss_mask = np.zeros(length, dtype=bool)
    for i, t in enumerate(targets):
        if t < cfg.text_vocab_size or t == cfg.eot:
            target_segments[i], loss_mask[i] = TEXT, True
        elif t < cfg.bot or t == cfg.eos:
            target_segments[i], loss_mask[i] = SPEECH, True
    return SequenceLayout(tokens, segments, positions, targets, loss_mask, target_segments, e_ref)


def init_params(cfg, rng, dtype=np.float32, init_std=0.02, zero_head=True):
    """GPT-2 style initialisation; residual projections scaled by 1/sqrt(2 * n_layers)."""
    params = {}
    resid_std = init_std / np.sqrt(2 * cfg.n_layers)
    for name, shape in cfg.parameter_shapes().items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith(".b"):
            arr = np.zeros(shape)
        elif name == "head" and zero_head:
            arr = np.zeros(shape)
        elif name.endswith("attn.proj") or name.endswith("mlp.proj"):
            arr = rng.normal(0.0, resid_std, size=shape)
        else:
            arr = rng.normal(0.0, init_std, size=shape)
        params[name] = Tensor(arr, requires_grad=True, dtype=dtype, name=name)
    return params


@dataclass
class _Packed:
    tokens: np.ndarray
    text_pos: np.ndarray
    speech_pos: np.ndarray
    ref_owner: np.ndarray
    allowed_attention: np.ndarray
    e_refs: np.ndarray
    offsets: np.ndarray


def _pack(layouts):
    tokens, text_pos, speech_pos, ref_owner, owner = [], [], [], [], []
    for b, lay in enumerate(layouts):
        tokens.append(np.where(lay.segments == REF, -1, lay.tokens))
        text_pos.append(np.where(lay.segments == TEXT, lay.positions, -1))
        speech_pos.append(np.where(lay.segments == SPEECH, lay.positions, -1))
        ref_owner.append(np.where(lay.segments == REF, b, -1))
        owner.append(np.full(len(lay), b))
    owner = np.concatenate(owner)
    T = len(owner)
    causal = np.tril(np.ones((T, T), dtype=bool))
    allowed = causal & (owner[:, None] == owner[None, :])
    offsets = np.cumsum([0] + [len(lay) for lay in layouts])
    return _Packed(np.concatenate(tokens), np.concatenate(text_pos), np.concatenate(speech_pos),
                   np.concatenate(ref_owner), allowed, np.stack([lay.e_ref for lay in layouts]), offsets)


def forward_hidden(params, cfg, layouts, rng=None, training=False):
    """Final-norm hidden states for all packed positions of ``layouts``."""
    pk = _pack(layouts)
    p = params
    dt = p["tok_emb"].dtype
    ref = add(matmul(Tensor._wrap(pk.e_refs.astype(dt)), p["ref_proj.w"]), p["ref_proj.b"])
    x = embedding(p["tok_emb"], pk.tokens)
    x = add(x, embedding(p["pos_text"], pk.text_pos))
    x = add(x, embedding(p["pos_speech"], pk.speech_pos))
    x = add(x, embedding(ref, pk.ref_owner))
    drop = cfg.dropout if training else 0.0
    if drop:
        x = dropout(x, drop, rng)
    d = cfg.d_model
    for i in range(cfg.n_layers):
        h = layer_norm(x, p[f"h{i}.ln1.g"], p[f"h{i}.ln1.b"])
        qkv = matmul(h, p[f"h{i}.attn.qkv"])
        q, k, v = qkv[:, :d], qkv[:, d : 2 * d], qkv[:, 2 * d :]
        att = matmul(causal_attention(q, k, v, cfg.n_heads, pk.allowed_attention), p[f"h{i}.attn.proj"])
        if drop:
            att = dropout(att, drop, rng)
        x = add(x, att)
        h = layer_norm(x, p[f"h{i}.ln2.g"], p[f"h{i}.ln2.b"])
        h = matmul(gelu(matmul(h, p[f"h{i}.mlp.fc"])), p[f"h{i}.mlp.proj"])
        if drop:
            h = dropout(h, drop, rng)
        x = add(x, h)
    return layer_norm(x, p["ln_f.g"], p["ln_f.b"]), pk.offsets


def forward_logits(params, cfg, layouts, rows=None, rng=None, training=False):
    """Logits over the unified vocabulary at packed ``rows`` (all rows by default)."""
    hidden, offsets = forward_hidden(params, cfg, layouts, rng=rng, training=training)
    if rows is not None:
        hidden = getitem(hidden, np.asarray(rows, dtype=np.int64))
    return matmul(hidden, params["head"]), offsets


def _loss_rows(layouts, cfg, text_weight):
    rows, targets, allowed, weights, owners = [], [], [], [], []
    offset = 0
    allowed_text, allowed_speech = cfg.allowed_classes(TEXT), cfg.allowed_classes(SPEECH)
    for b, lay in enumerate(layouts):
        for i in np.nonzero(lay.loss_mask)[0]:
            rows.append(offset + i)
            targets.append(lay.targets[i])
            is_text = lay.target_segments[i] == TEXT
            allowed.append(allowed_text if is_text else allowed_speech)
            weights.append(text_weight if is_text else 1.0)
            owners.append(b)
        offset += len(lay)
    return (np.array(rows, dtype=np.int64), np.array(targets, dtype=np.int64),
            np.array(allowed), np.array(weights), np.array(owners))


def token_losses(params, cfg, layouts):
    """Per-row negative log-likelihoods (numpy) keyed by packed loss row."""
    rows, targets, allowed, _, _ = _loss_rows(layouts, cfg, 1.0)
    logits, _ = forward_logits(params, cfg, layouts, rows=rows)
    nll = cross_entropy_logits(logits, targets, np.ones(len(rows), bool), allowed=allowed, reduction="none")
    return rows, nll.data


def batch_loss(layouts, params, cfg, text_weight=1.0, rng=None, training=False):
    """Mean over utterances of each utterance's summed text + speech cross-entropy."""
    if not layouts:
        raise InvalidInputError("empty batch")
    rows, targets, allowed, weights, _ = _loss_rows(layouts, cfg, text_weight)
    logits, _ = forward_logits(params, cfg, layouts, rows=rows, rng=rng, training=training)
    nll = cross_entropy_logits(logits, targets, np.ones(len(rows), bool), allowed=allowed, reduction="none")
    w = (weights / len(layouts)).astype(nll.dtype)
    return total(mul(nll, w))


def lm_loss(layout, params, cfg, text_weight=1.0):
    """Summed loss of a single layout."""
    return batch_loss([layout], params, cfg, text_weight)


def teacher_forced_accuracy(params, cfg, layouts):
    """Fraction of speech-segment targets (speech ids and EOS) predicted by restricted argmax."""
    rows, targets, allowed, _, _ = _loss_rows(layouts, cfg, 1.0)
    logits, _ = forward_logits(params, cfg, layouts, rows=rows)
    z = np.where(allowed, logits.data, -np.inf)
    speech = allowed[:, cfg.eos]
    pred = z.argmax(axis=1)
    return float(np.mean(pred[speech] == targets[speech]))


@dataclass
class Sampling:
    mode: str = "top_k"
    k: int = 8
    temperature: float = 0.8
    max_new: int | None = None

    def __post_init__(self):
        if self.mode not in ("greedy", "top_k"):
            raise InvalidInputError(f"unknown sampling mode {self.mode!r}")


def generate(text_ids, e_ref, params, cfg, sampling=Sampling(), rng=None):
    """Autoregressively sample speech ids (codec id space) until EOS or ``max_new``."""
    prompt = assemble_sequence(text_ids, None, e_ref, cfg)
    room = cfg.max_sequence_len - len(prompt)
    max_new = room if sampling.max_new is None else int(sampling.max_new)
    if max_new > room or room <= 0:
        raise SequenceTooLongError(len(prompt) + max_new, cfg.max_sequence_len)
    rng = rng if rng is not None else np.random.default_rng(0)
    allowed = cfg.allowed_classes(SPEECH)
    out = []
    for _ in range(max_new):
        layout = assemble_sequence(text_ids, out, e_ref, cfg) if out else prompt
        if out:
            # drop the EOS that assemble appends to completed speech
            layout = _truncate(layout, len(layout) - 1)
        logits, _ = forward_logits(params, cfg, [layout], rows=[len(layout) - 1])
        z = np.where(allowed, logits.data[0].astype(np.float64), -np.inf)
        nxt = _pick(z, sampling, rng)
        if nxt == cfg.eos:
            break
        out.append(int(nxt - cfg.text_vocab_size))
    return out


def _truncate(layout, n):
    return SequenceLayout(layout.tokens[:n], layout.segments[:n], layout.positions[:n],
                          layout.targets[:n], layout.loss_mask[:n], layout.target_segments[:n], layout.e_ref)


def _pick(z, sampling, rng):
    if sampling.mode == "greedy" or sampling.temperature <= 0:
        return int(np.argmax(z))
    k = max(1, min(int(sampling.k), int(np.isfinite(z).sum())))
    top = np.argsort(-z, kind="stable")[:k]
    logits = z[top] / sampling.temperature
    logits -= logits.max()
    probs = np.exp(logits)
    probs /= probs.sum()
    return int(top[rng.choice(k, p=probs)])


class SpeechLM(BaseEstimator):
    """Estimator wrapper around the transformer.

    ``X`` is a sequence of ``(text_ids, reference)`` pairs, where ``reference``
    is either a fixed embedding or a callable ``rng -> embedding`` that is
    re-sampled at every training step; ``y`` holds the speech token sequences.
    """

    def __init__(self, n_layers=4, n_heads=4, d_model=128, text_vocab_size=512,
                 speech_vocab_size=256, ref_dim=128, max_sequence_len=512, dropout=0.0,
                 text_loss_weight=1.0, learning_rate=3e-4, betas=(0.9, 0.95), weight_decay=0.01,
                 accumulation_target=1, batch_size=8, max_steps=2000, early_stop_accuracy=None,
                 init_std=0.02, zero_init_head=True, dtype="float32", random_state=0):
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_model = d_model
        self.text_vocab_size = text_vocab_size
        self.speech_vocab_size = speech_vocab_size
        self.ref_dim = ref_dim
        self.max_sequence_len = max_sequence_len
        self.dropout = dropout
        self.text_loss_weight = text_loss_weight
        self.learning_rate = learning_rate
        self.betas = betas
        self.weight_decay = weight_decay
        self.accumulation_target = accumulation_target
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.early_stop_accuracy = early_stop_accuracy
        self.init_std = init_std
        self.zero_init_head = zero_init_head
        self.dtype = dtype
        self.random_state = random_state

    @property
    def config(self):
        return LmConfig(self.n_layers, self.n_heads, self.d_model, self.text_vocab_size,
                        self.speech_vocab_size, self.ref_dim, self.max_sequence_len, self.dropout)

    def initialize(self):
        cfg = self.config
        self.rng_ = np.random.default_rng(self.random_state)
        self.params_ = init_params(cfg, self.rng_, np.dtype(self.dtype).type, self.init_std,
                                   self.zero_init_head)
        self.optimizer_ = Adam(self.params_.values(), lr=self.learning_rate, betas=self.betas,
                               weight_decay=self.weight_decay,
                               accumulation_target=self.accumulation_target)
        self.loss_curve_ = []
        self.skipped_ = []
        self.n_updates_ = 0
        return self

    def _layouts(self, X, y, indices, rng):
        cfg = self.config
        out = []
        for i in indices:
            text_ids, ref = X[i]
            e_ref = ref(rng) if callable(ref) else ref
            out.append(assemble_sequence(text_ids, y[i], e_ref, cfg))
        return out

    def fit(self, X, y):
        X, y = list(X), list(y)
        if len(X) != len(y) or not X:
            raise InvalidInputError("X and y must be non-empty and of equal length")
        self.initialize()
        cfg = self.config
        usable = []
        for i, ((text_ids, _), speech) in enumerate(zip(X, y)):
            length = 1 + len(text_ids) + 2 + len(speech) + 2
            if length > cfg.max_sequence_len:
                log.warning("skipping utterance %d: length %d exceeds %d", i, length, cfg.max_sequence_len)
                self.skipped_.append(i)
            else:
                usable.append(i)
        if not usable:
            raise InvalidInputError("every utterance exceeds max_sequence_len")
        rng = self.rng_
        for step in range(self.max_steps):
            if len(usable) > self.batch_size:
                batch = rng.choice(usable, size=self.batch_size, replace=False)
            else:
                batch = usable
            loss = self.partial_fit_batch(self._layouts(X, y, batch, rng))
            if step % 100 == 0:
                log.info("lm step %d loss %.4f", step, loss)
            if (self.early_stop_accuracy is not None and self.optimizer_.state.accumulation_count == 0
                    and (step + 1) % 50 == 0):
                acc = self.score([X[i] for i in usable], [y[i] for i in usable], rng=rng)
                if acc >= self.early_stop_accuracy:
                    log.info("lm reached accuracy %.4f at step %d", acc, step)
                    break
        if self.skipped_:
            log.warning("skipped %d of %d utterances as too long", len(self.skipped_), len(X))
        return self

    def partial_fit_batch(self, layouts):
        """One micro-batch: forward, backward, fold into the optimizer; returns the loss."""
        check_is_fitted(self, "params_")
        with Tape() as tape:
            loss = batch_loss(layouts, self.params_, self.config, self.text_loss_weight,
                              rng=self.rng_, training=True)
        value = float(loss.item())
        if not np.isfinite(value):
            raise NumericalError("LM loss is not finite")
        for p in self.params_.values():
            p.grad = None
        tape.backward(loss)
        if self.optimizer_.accumulate_and_step():
            self.n_updates_ += 1
        self.loss_curve_.append(value)
        return value

    def score(self, X, y, rng=None):
        check_is_fitted(self, "params_")
        rng = rng if rng is not None else np.random.default_rng(0)
        layouts = self._layouts(list(X), list(y), range(len(X)), rng)
        return teacher_forced_accuracy(self.params_, self.config, layouts)

    def predict(self, X, greedy=True, top_k=8, temperature=0.8, max_new=None, random_state=None):
        check_is_fitted(self, "params_")
        sampling = Sampling("greedy" if greedy else "top_k", top_k, temperature, max_new)
        rng = np.random.default_rng(random_state)
        out = []
        for text_ids, ref in X:
            e_ref = ref(rng) if callable(ref) else ref
            out.append(generate(text_ids, e_ref, self.params_, self.config, sampling, rng))
        return out

    def state_dict(self):
        check_is_fitted(self, "params_")
        return {name: t.data for name, t in self.params_.items()}

    @classmethod
    def from_state_dict(cls, config, tensors):
        lm = cls(**config).initialize()
        dt = np.dtype(lm.dtype)
        for name, arr in tensors.items():
            if name not in lm.params_:
                raise InvalidInputError(f"unexpected tensor {name!r} in LM checkpoint")
            if lm.params_[name].shape != arr.shape:
                raise InvalidInputError(f"tensor {name!r} has shape {arr.shape}, expected {lm.params_[name].shape}")
            lm.params_[name].data = np.array(arr, dtype=dt)
        missing = set(lm.params_) - set(tensors)
        if missing:
            raise InvalidInputError(f"LM checkpoint lacks tensors: {sorted(missing)[:3]}")
        return lm
