"""Decoupled VQ-VAE speech codec over log-mel spectrograms.

The content path (convolutions, 4x temporal downsampling, vector quantiser)
yields discrete tokens.  A separate reference encoder mean-pools a clip of
the utterance into one global embedding.  The decoder sees both, so the
tokens only need to carry what the global embedding cannot.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dsp import MelConfig, MelSpectrogram
from .exceptions import InvalidInputError, NumericalError
from .numerics import (
    Adam,
    Tape,
    Tensor,
    add,
    concat,
    embedding,
    gelu,
    matmul,
    mean,
    mse,
    reshape,
    straight_through,
    unfold1d,
)

log = logging.getLogger(__name__)

KERNEL = 3


@dataclass
class Codebook:
    embeddings: np.ndarray  # (K, D)
    cluster_size: np.ndarray  # (K,) EMA usage counts
    ema_sum: np.ndarray  # (K, D)

    @property
    def size(self):
        return self.embeddings.shape[0]

    @property
    def dim(self):
        return self.embeddings.shape[1]

    @classmethod
    def from_vectors(cls, vectors):
        vectors = np.array(vectors, copy=True)
        return cls(vectors, np.ones(len(vectors), dtype=vectors.dtype), vectors.copy())

    def ema_update(self, z, ids, decay, eps=1e-5):
        """Move each used codeword towards the mean of the vectors assigned to it."""
        K = self.size
        onehot = np.zeros((len(ids), K), dtype=z.dtype)
        onehot[np.arange(len(ids)), ids] = 1.0
        self.cluster_size *= decay
        self.cluster_size += (1.0 - decay) * onehot.sum(axis=0)
        self.ema_sum *= decay
        self.ema_sum += (1.0 - decay) * (onehot.T @ z)
        n = self.cluster_size.sum()
        smoothed = (self.cluster_size + eps) / (n + K * eps) * n
        self.embeddings = self.ema_sum / smoothed[:, None]

    def reseed_dead(self, z, threshold, rng):
        dead = np.nonzero(self.cluster_size < threshold)[0]
        if len(dead) == 0 or len(z) == 0:
            return 0
        picks = z[rng.integers(0, len(z), size=len(dead))]
        self.embeddings[dead] = picks
        self.ema_sum[dead] = picks
        self.cluster_size[dead] = 1.0
        return len(dead)


@dataclass
class SpeechTokens:
    ids: np.ndarray
    downsample_factor: int = 4

    def __len__(self):
        return len(self.ids)


@dataclass
class QuantizeResult:
    ids: np.ndarray
    z_q: Tensor  # straight-through output: value of the codewords, gradient to z
    commitment: Tensor


def nearest_codewords(z, codebook):
    """Index of the closest codeword per row; ties resolve to the smallest index."""
    z = np.asarray(z)
    if z.ndim != 2 or z.shape[1] != codebook.dim:
        raise InvalidInputError(f"latent rows must have dimension {codebook.dim}")
    diff = z[:, None, :] - codebook.embeddings[None, :, :]
    return np.argmin((diff * diff).sum(axis=2), axis=1)


def quantize(z, codebook):
    if not isinstance(z, Tensor):
        z = Tensor(z)
    ids = nearest_codewords(z.data, codebook)
    chosen = codebook.embeddings[ids].astype(z.dtype)
    return QuantizeResult(ids, straight_through(z, chosen), mse(z, chosen))


def codebook_perplexity(ids, K):
    counts = np.bincount(np.asarray(ids).reshape(-1), minlength=K).astype(np.float64)
    p = counts / max(counts.sum(), 1.0)
    nz = p[p > 0]
    return float(np.exp(-(nz * np.log(nz)).sum()))


def _mel_values(m):
    return m.values if isinstance(m, MelSpectrogram) else np.asarray(m, dtype=np.float64)


def _conv(x, w, b):
    return add(matmul(unfold1d(x, KERNEL), w), b)


class SpeechCodec(TransformerMixin, BaseEstimator):
    """Mel-spectrogram codec with a global reference embedding.

    ``transform`` maps mels to token sequences; ``decode`` maps tokens plus a
    reference embedding back to mels.
    """

    def __init__(self, n_mels=80, codebook_size=256, code_dim=128, ref_dim=128, hidden=128,
                 downsample=4, beta=0.25, ema_decay=0.99, dead_code_threshold=1e-3,
                 learning_rate=2e-3, max_steps=500, batch_size=16, clip_frames=32,
                 random_state=0, dtype="float32"):
        self.n_mels = n_mels
        self.codebook_size = codebook_size
        self.code_dim = code_dim
        self.ref_dim = ref_dim
        self.hidden = hidden
        self.downsample = downsample
        self.beta = beta
        self.ema_decay = ema_decay
        self.dead_code_threshold = dead_code_threshold
        self.learning_rate = learning_rate
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.clip_frames = clip_frames
        self.random_state = random_state
        self.dtype = dtype

    # -- parameters ----------------------------------------------------------

    def _init_params(self, rng):
        F, H, D, R, S = self.n_mels, self.hidden, self.code_dim, self.ref_dim, self.downsample
        dt = np.dtype(self.dtype)
        shapes = {
            "enc.conv1.w": (KERNEL * F, H), "enc.conv1.b": (H,),
            "enc.conv2.w": (KERNEL * H, H), "enc.conv2.b": (H,),
            "enc.down.w": (S * H, D), "enc.down.b": (D,),
            "ref.conv.w": (KERNEL * F, H), "ref.conv.b": (H,),
            "ref.proj.w": (H, R), "ref.proj.b": (R,),
            "dec.in.w": (D + R, H), "dec.in.b": (H,),
            "dec.up.w": (H, S * H), "dec.up.b": (S * H,),
            "dec.conv.w": (KERNEL * H, H), "dec.conv.b": (H,),
            "dec.out.w": (H, F), "dec.out.b": (F,),
        }
        params = {}
        for name, shape in shapes.items():
            if name.endswith(".b"):
                arr = np.zeros(shape, dtype=dt)
            else:
                arr = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape).astype(dt)
            params[name] = Tensor(arr, requires_grad=True, dtype=dt, name=name)
        return params

    # -- building blocks -----------------------------------------------------

    def _normalize(self, values):
        return ((values - self.mel_mean_) / self.mel_std_).astype(self.dtype)

    def _pad(self, x):
        S = self.downsample
        rem = (-len(x)) % S
        if rem:
            x = np.concatenate([x, np.repeat(x[-1:], rem, axis=0)])
        return x

    def _encode_latent(self, x):
        p = self.params_
        h = gelu(_conv(x, p["enc.conv1.w"], p["enc.conv1.b"]))
        h = gelu(_conv(h, p["enc.conv2.w"], p["enc.conv2.b"]))
        h = reshape(h, (h.shape[0] // self.downsample, self.downsample * self.hidden))
        return add(matmul(h, p["enc.down.w"]), p["enc.down.b"])

    def _reference(self, x):
        p = self.params_
        h = gelu(_conv(x, p["ref.conv.w"], p["ref.conv.b"]))
        pooled = reshape(mean(h, axis=0), (1, self.hidden))
        return add(matmul(pooled, p["ref.proj.w"]), p["ref.proj.b"])

    def _decode(self, z_q, e_ref):
        p = self.params_
        n = z_q.shape[0]
        cond = embedding(e_ref, np.zeros(n, dtype=np.int64))
        h = gelu(add(matmul(concat([z_q, cond], axis=1), p["dec.in.w"]), p["dec.in.b"]))
        h = add(matmul(h, p["dec.up.w"]), p["dec.up.b"])
        h = gelu(reshape(h, (n * self.downsample, self.hidden)))
        h = gelu(_conv(h, p["dec.conv.w"], p["dec.conv.b"]))
        return add(matmul(h, p["dec.out.w"]), p["dec.out.b"])

    def _random_clip(self, x, clip_frames, rng):
        n = min(clip_frames, len(x))
        start = int(rng.integers(0, len(x) - n + 1))
        return x[start : start + n]

    # -- training ------------------------------------------------------------

    def fit(self, X, y=None):
        mels = [_mel_values(m) for m in X]
        if not mels:
            raise InvalidInputError("cannot train a codec on an empty batch")
        for m in mels:
            if m.ndim != 2 or m.shape[1] != self.n_mels or len(m) < 1:
                raise InvalidInputError(f"each mel must be (frames, {self.n_mels})")
        rng = np.random.default_rng(self.random_state)
        frames = np.concatenate(mels)
        # stored at 32-bit precision so checkpoints reproduce them exactly
        self.mel_mean_ = frames.mean(axis=0).astype(np.float32).astype(np.float64)
        self.mel_std_ = np.maximum(frames.std(axis=0), 1e-2).astype(np.float32).astype(np.float64)
        self.params_ = self._init_params(rng)
        normed = [self._pad(self._normalize(m)) for m in mels]
        latents = np.concatenate([self._encode_latent(Tensor._wrap(x)).data for x in normed])
        picks = rng.integers(0, len(latents), size=self.codebook_size)
        noise = rng.normal(0.0, 1e-3, size=(self.codebook_size, self.code_dim))
        self.codebook_ = Codebook.from_vectors((latents[picks] + noise).astype(self.dtype))
        self.optimizer_ = Adam(self.params_.values(), lr=self.learning_rate, betas=(0.9, 0.99),
                               weight_decay=0.0)
        self.history_ = []
        for _ in range(self.max_steps):
            if len(normed) > self.batch_size:
                idx = rng.choice(len(normed), size=self.batch_size, replace=False)
                batch = [normed[i] for i in idx]
            else:
                batch = normed
            self.history_.append(self._train_step(batch, rng))
        return self

    def _train_step(self, batch, rng, beta=None):
        beta = self.beta if beta is None else beta
        latents, all_ids = [], []
        with Tape() as tape:
            loss = recon_sum = commit_sum = None
            for x in batch:
                xt = Tensor._wrap(x)
                z = self._encode_latent(xt)
                q = quantize(z, self.codebook_)
                e = self._reference(Tensor._wrap(self._random_clip(x, self.clip_frames, rng)))
                recon = mse(self._decode(q.z_q, e), x)
                term = add(recon, q.commitment * beta) if beta else recon
                loss = term if loss is None else add(loss, term)
                recon_sum = recon.item() + (recon_sum or 0.0)
                commit_sum = q.commitment.item() + (commit_sum or 0.0)
                latents.append(z.data)
                all_ids.append(q.ids)
            loss = loss * (1.0 / len(batch))
        if not np.isfinite(loss.data).all():
            raise NumericalError("codec loss is not finite; step aborted")
        for p in self.params_.values():
            p.grad = None
        tape.backward(loss)
        self.optimizer_.accumulate_and_step()
        z_all = np.concatenate(latents)
        ids = np.concatenate(all_ids)
        self.codebook_.ema_update(z_all, ids, self.ema_decay)
        reseeded = self.codebook_.reseed_dead(z_all, self.dead_code_threshold, rng)
        return {
            "loss": float(loss.item()),
            "recon": recon_sum / len(batch),
            "commitment": commit_sum / len(batch),
            "perplexity": codebook_perplexity(ids, self.codebook_size),
            "reseeded": int(reseeded),
        }

    # -- inference -----------------------------------------------------------

    def transform(self, X):
        return [self.encode(m).ids for m in X]

    def encode(self, mel):
        check_is_fitted(self, "params_")
        x = self._pad(self._normalize(_mel_values(mel)))
        z = self._encode_latent(Tensor._wrap(x))
        return SpeechTokens(nearest_codewords(z.data, self.codebook_), self.downsample)

    def decode(self, tokens, e_ref, config=None):
        check_is_fitted(self, "params_")
        ids = np.asarray(getattr(tokens, "ids", tokens), dtype=np.int64).reshape(-1)
        if ids.size == 0:
            raise InvalidInputError("cannot decode an empty token sequence")
        if ids.min() < 0 or ids.max() >= self.codebook_size:
            raise InvalidInputError(f"token id outside codebook of size {self.codebook_size}")
        e = np.asarray(e_ref, dtype=self.dtype).reshape(1, self.ref_dim)
        z_q = Tensor._wrap(self.codebook_.embeddings[ids].astype(self.dtype))
        out = self._decode(z_q, Tensor._wrap(e)).data.astype(np.float64)
        values = out * self.mel_std_ + self.mel_mean_
        cfg = config or MelConfig(n_mels=self.n_mels)
        return MelSpectrogram(np.maximum(values, cfg.floor_value), cfg)

    def inverse_transform(self, X):
        return [self.decode(tokens, e_ref) for tokens, e_ref in X]

    def reference_embedding(self, mel, clip_frames=None, rng=None):
        """Global embedding of ``mel``; of a random clip when ``clip_frames`` is given."""
        check_is_fitted(self, "params_")
        x = self._normalize(_mel_values(mel))
        if len(x) < 1:
            raise InvalidInputError("mel has no frames")
        if clip_frames is not None:
            x = self._random_clip(x, clip_frames, rng if rng is not None else np.random.default_rng())
        return self._reference(Tensor._wrap(x)).data.reshape(-1).astype(np.float64)

    def reconstruction_mse(self, X, rng=None):
        """Mean normalised-mel MSE of encode -> decode with full-utterance embeddings."""
        errs = []
        for m in X:
            x = self._pad(self._normalize(_mel_values(m)))
            tokens = nearest_codewords(self._encode_latent(Tensor._wrap(x)).data, self.codebook_)
            e = self._reference(Tensor._wrap(x))
            z_q = Tensor._wrap(self.codebook_.embeddings[tokens].astype(self.dtype))
            out = self._decode(z_q, e).data
            errs.append(float(np.mean((out - x) ** 2)))
        return float(np.mean(errs))

    # -- persistence ---------------------------------------------------------

    def state_dict(self):
        check_is_fitted(self, "params_")
        tensors = {name: t.data for name, t in self.params_.items()}
        tensors["codebook.embeddings"] = self.codebook_.embeddings
        tensors["codebook.cluster_size"] = self.codebook_.cluster_size
        tensors["codebook.ema_sum"] = self.codebook_.ema_sum
        tensors["norm.mean"] = self.mel_mean_
        tensors["norm.std"] = self.mel_std_
        return tensors

    @classmethod
    def from_state_dict(cls, config, tensors):
        codec = cls(**config)
        dt = np.dtype(codec.dtype)
        codec.params_ = {
            name: Tensor(arr, requires_grad=True, dtype=dt, name=name)
            for name, arr in tensors.items()
            if name.split(".")[0] in ("enc", "dec", "ref")
        }
        codec.codebook_ = Codebook(
            np.array(tensors["codebook.embeddings"], dtype=dt),
            np.array(tensors["codebook.cluster_size"], dtype=dt),
            np.array(tensors["codebook.ema_sum"], dtype=dt),
        )
        codec.mel_mean_ = np.asarray(tensors["norm.mean"], dtype=np.float64)
        codec.mel_std_ = np.asarray(tensors["norm.std"], dtype=np.float64)
        return codec


# Functional entry points mirroring the estimator methods.


def encode_utterance(mel, codec):
    return codec.encode(mel)


def decode_utterance(tokens, e_ref, codec):
    return codec.decode(tokens, e_ref)


def extract_ref_embedding(mel, codec, clip_frames, rng):
    return codec.reference_embedding(mel, clip_frames=clip_frames, rng=rng)


def codec_train_step(batch, codec, rng, beta=None):
    """One optimisation step on already-normalised, padded mels."""
    return codec._train_step(batch, rng, beta=beta)
