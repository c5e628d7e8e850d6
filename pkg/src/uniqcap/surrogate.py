"""Learned similarity predictor.

A small transformer encoder reads three tokens: the projected embedding of
clip i, the projected embedding of clip j, and a learnable token for prompt
k, each summed with a learned role encoding. A linear head on the prompt
token's output regresses s(v_i, v_j, p_k). Once trained, it fills a
similarity tensor from clip embeddings alone, with no captioning.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import torch
from torch import nn

from .embedding import SURROGATE, ClipSet, SimilarityTensor
from .errors import FormatError, InvalidInputError, TrainingError

CHECKPOINT_MAGIC = b"CDPN"
CHECKPOINT_VERSION = 1


class SimilarityPredictor(nn.Module):
    def __init__(self, dim: int, n_prompts: int, model_dim: int = 128,
                 n_layers: int = 2, n_heads: int = 4, ff_dim: int = 1024):
        super().__init__()
        if min(dim, n_prompts, model_dim, n_layers, n_heads, ff_dim) < 1:
            raise InvalidInputError("all model sizes must be positive")
        if model_dim % n_heads:
            raise InvalidInputError(f"model_dim={model_dim} not divisible by n_heads={n_heads}")
        self.hparams = dict(dim=dim, model_dim=model_dim, n_prompts=n_prompts,
                            n_layers=n_layers, n_heads=n_heads, ff_dim=ff_dim)
        self.input_proj = nn.Linear(dim, model_dim)
        self.prompt_tokens = nn.Parameter(torch.empty(n_prompts, model_dim))
        # slots: clip i, clip j, prompt
        self.role_encodings = nn.Parameter(torch.empty(3, model_dim))
        layer = nn.TransformerEncoderLayer(
            model_dim, n_heads, ff_dim, dropout=0.0, activation="gelu", batch_first=True
        )
        self.encoder = nn.TransformerEncoder(layer, n_layers, enable_nested_tensor=False)
        self.head = nn.Linear(model_dim, 1)

    @property
    def dim(self) -> int:
        return self.hparams["dim"]

    @property
    def n_prompts(self) -> int:
        return self.hparams["n_prompts"]

    def forward(self, emb_i: torch.Tensor, emb_j: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        seq = torch.stack(
            [self.input_proj(emb_i), self.input_proj(emb_j), self.prompt_tokens[k]], dim=1
        )
        out = self.encoder(seq + self.role_encodings)
        return self.head(out[:, 2]).squeeze(-1)


def _reset_parameters(model: SimilarityPredictor, seed: int) -> None:
    gen = torch.Generator().manual_seed(int(seed))
    params = dict(model.named_parameters())
    md = model.hparams["model_dim"]
    with torch.no_grad():
        for name, p in params.items():
            if ".norm" in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
                continue
            if name in ("prompt_tokens", "role_encodings"):
                fan_in = md
            elif p.dim() == 2:
                fan_in = p.shape[1]
            else:
                fan_in = params[name[: -len("bias")] + "weight"].shape[1]
            bound = 1.0 / math.sqrt(fan_in)
            p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * (2 * bound) - bound)


def init_model(dim: int, n_prompts: int, model_dim: int = 128, seed: int = 0, *,
               n_layers: int = 2, n_heads: int = 4, ff_dim: int = 1024) -> SimilarityPredictor:
    """Build a predictor with weights drawn uniformly in +-1/sqrt(fan_in),
    reproducible from ``seed``."""
    model = SimilarityPredictor(dim, n_prompts, model_dim, n_layers, n_heads, ff_dim)
    _reset_parameters(model, seed)
    return model


def parameter_vector(model: nn.Module) -> np.ndarray:
    return torch.nn.utils.parameters_to_vector(model.parameters()).detach().cpu().numpy()


def _check_inputs(model, emb_i, emb_j, k):
    if emb_i.shape[-1] != model.dim or emb_j.shape[-1] != model.dim:
        raise InvalidInputError(
            f"embedding dim {emb_i.shape[-1]}/{emb_j.shape[-1]} does not match model dim {model.dim}"
        )
    if k.numel() and (int(k.min()) < 0 or int(k.max()) >= model.n_prompts):
        raise InvalidInputError(f"prompt index out of range [0, {model.n_prompts})")


def predict(model: SimilarityPredictor, emb_i, emb_j, k) -> Union[float, np.ndarray]:
    """Predicted similarity for one (clip, clip, prompt) triple, or a batch."""
    single = np.ndim(k) == 0
    dtype = next(model.parameters()).dtype
    ei = torch.as_tensor(np.ascontiguousarray(np.atleast_2d(getattr(emb_i, "values", emb_i))), dtype=dtype)
    ej = torch.as_tensor(np.ascontiguousarray(np.atleast_2d(getattr(emb_j, "values", emb_j))), dtype=dtype)
    kk = torch.as_tensor(np.atleast_1d(k), dtype=torch.long)
    _check_inputs(model, ei, ej, kk)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(ei, ej, kk).numpy()
    model.train(was_training)
    return float(out[0]) if single else out


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 25
    lr: float = 1e-4
    milestones: tuple = (15, 20)
    gamma: float = 0.1
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidInputError("epochs and batch_size must be positive")
        if any(m >= self.epochs for m in self.milestones):
            raise InvalidInputError(f"decay epochs {self.milestones} must precede epochs={self.epochs}")

    @classmethod
    def extended(cls, epochs: int, **kw) -> "TrainConfig":
        """Default recipe stretched to ``epochs``, decay points kept at the
        same fractions (15/25 and 20/25) of training."""
        return cls(epochs=epochs, milestones=(round(epochs * 0.6), round(epochs * 0.8)), **kw)


@dataclass(frozen=True)
class SimilaritySample:
    embed_i: np.ndarray
    embed_j: np.ndarray
    k: int
    target: float


@dataclass(frozen=True)
class SampleSet:
    """Column-wise samples: (M, dim), (M, dim), (M,), (M,)."""

    embed_i: np.ndarray
    embed_j: np.ndarray
    k: np.ndarray
    target: np.ndarray

    def __len__(self):
        return len(self.target)

    def take(self, idx) -> "SampleSet":
        return SampleSet(self.embed_i[idx], self.embed_j[idx], self.k[idx], self.target[idx])


def as_sample_set(samples) -> SampleSet:
    if isinstance(samples, SampleSet):
        return samples
    samples = list(samples)
    return SampleSet(
        np.stack([np.asarray(getattr(s.embed_i, "values", s.embed_i), dtype=np.float32) for s in samples]),
        np.stack([np.asarray(getattr(s.embed_j, "values", s.embed_j), dtype=np.float32) for s in samples]),
        np.array([s.k for s in samples], dtype=np.int64),
        np.array([s.target for s in samples], dtype=np.float32),
    )


def samples_from_tensor(clips: ClipSet, tensor: SimilarityTensor, cells=None) -> SampleSet:
    """Training samples (f(v_i(t)), f(v_j(t)), k) -> s[i, j, k, t].

    ``cells`` is an optional (M, 4) array of (i, j, k, t) indices; all cells
    are used by default.
    """
    if cells is None:
        cells = np.argwhere(np.ones(tensor.shape, dtype=bool))
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 4)
    i, j, k, t = cells.T
    emb = clips.embeddings
    return SampleSet(emb[i, t], emb[j, t], k, tensor.values[i, j, k, t].astype(np.float32))


def train(model: SimilarityPredictor, samples, cfg: TrainConfig = TrainConfig()):
    """Minimise MSE with Adam and step decay. Returns (model, per-epoch loss)."""
    data = as_sample_set(samples)
    if len(data) == 0:
        raise InvalidInputError("need at least one training sample")
    if not np.all(np.abs(data.target) <= 1.0 + 1e-5):
        raise InvalidInputError("training targets must lie in [-1, 1]")
    dtype = next(model.parameters()).dtype
    ei = torch.as_tensor(data.embed_i, dtype=dtype)
    ej = torch.as_tensor(data.embed_j, dtype=dtype)
    kk = torch.as_tensor(data.k, dtype=torch.long)
    y = torch.as_tensor(data.target, dtype=dtype)
    _check_inputs(model, ei, ej, kk)

    gen = torch.Generator().manual_seed(int(cfg.seed))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(cfg.milestones), gamma=cfg.gamma)
    m = len(data)
    losses: List[float] = []
    model.train()
    for epoch in range(cfg.epochs):
        perm = torch.randperm(m, generator=gen)
        total = 0.0
        for b, start in enumerate(range(0, m, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            loss = torch.mean((model(ei[idx], ej[idx], kk[idx]) - y[idx]) ** 2)
            if not torch.isfinite(loss):
                raise TrainingError(epoch, b, loss.item())
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / m)
        sched.step()
    model.eval()
    return model, losses


def mse(model: SimilarityPredictor, samples) -> float:
    data = as_sample_set(samples)
    pred = predict(model, data.embed_i, data.embed_j, data.k)
    return float(np.mean((pred.astype(np.float64) - data.target) ** 2))


def predict_tensor(model: SimilarityPredictor, clips: ClipSet, bank, batch_size: int = 8192) -> SimilarityTensor:
    """Fill every (i, j, k, t) cell from clip embeddings via the model."""
    P = bank.P if hasattr(bank, "P") else int(bank)
    if P != model.n_prompts:
        raise InvalidInputError(f"bank has {P} prompts, model was built for {model.n_prompts}")
    n, n_adv = clips.n_clips, clips.max_advance + 1
    cells = np.argwhere(np.ones((n, n, P, n_adv), dtype=bool))
    i, j, k, t = cells.T
    emb = clips.embeddings
    out = np.empty(len(cells), dtype=np.float32)
    for s in range(0, len(cells), batch_size):
        sl = slice(s, s + batch_size)
        out[sl] = predict(model, emb[i[sl], t[sl]], emb[j[sl], t[sl]], k[sl])
    prompts = getattr(bank, "prompts", None)
    return SimilarityTensor(out.reshape(n, n, P, n_adv), SURROGATE, clips.clip_ids, prompts)


def _autograd_gradient(model, sample):
    model.zero_grad(set_to_none=True)
    loss = _sample_loss(model, sample)
    loss.backward()
    return torch.cat([p.grad.reshape(-1) if p.grad is not None else torch.zeros(p.numel(), dtype=p.dtype)
                      for p in model.parameters()])


def _sample_loss(model, sample):
    dtype = next(model.parameters()).dtype
    ei = torch.as_tensor(np.asarray(getattr(sample.embed_i, "values", sample.embed_i))[None], dtype=dtype)
    ej = torch.as_tensor(np.asarray(getattr(sample.embed_j, "values", sample.embed_j))[None], dtype=dtype)
    k = torch.tensor([int(sample.k)])
    return ((model(ei, ej, k) - float(sample.target)) ** 2).sum()


def gradient_check(model: SimilarityPredictor, sample: SimilaritySample, epsilon: float = 1e-4,
                   n_coords: int = 128, seed: int = 0, coords: Optional[Sequence[int]] = None,
                   gradient_fn=None) -> float:
    """Max relative error between analytic and central-difference gradients
    of the squared error, over a random subset of parameter coordinates.

    Runs on a float64 copy of the model. ``gradient_fn(model, sample)`` may
    replace the analytic gradient (used to test the check itself).
    """
    import copy

    m64 = copy.deepcopy(model).double().train()
    params = list(m64.parameters())
    flat = torch.nn.utils.parameters_to_vector(params).detach().clone()
    if not torch.all(torch.isfinite(flat)):
        raise InvalidInputError("parameters must be finite")
    if coords is None:
        rng = np.random.default_rng(seed)
        coords = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
    coords = np.asarray(coords, dtype=np.int64)
    analytic = (gradient_fn or _autograd_gradient)(m64, sample).detach()

    def loss_at(vec):
        torch.nn.utils.vector_to_parameters(vec, params)
        with torch.no_grad():
            return float(_sample_loss(m64, sample))

    worst = 0.0
    for c in coords:
        plus, minus = flat.clone(), flat.clone()
        plus[c] += epsilon
        minus[c] -= epsilon
        numeric = (loss_at(plus) - loss_at(minus)) / (2 * epsilon)
        a = float(analytic[c])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    torch.nn.utils.vector_to_parameters(flat, params)
    return worst


_HPARAM_ORDER = ("dim", "model_dim", "n_prompts", "n_layers", "n_heads", "ff_dim")


def save_checkpoint(path, model: SimilarityPredictor) -> None:
    """Write a CDPN checkpoint.

    Layout: ``b"CDPN" | u8 version | 6 x u32le (dim, model_dim, n_prompts,
    n_layers, n_heads, ff_dim) | u32le parameter count`` followed by every
    tensor of ``model.state_dict()`` in its iteration order, flattened
    row-major as float32le.
    """
    hp = model.hparams
    state = model.state_dict()
    total = sum(v.numel() for v in state.values())
    header = CHECKPOINT_MAGIC + struct.pack(
        "<B7I", CHECKPOINT_VERSION, *(hp[key] for key in _HPARAM_ORDER), total
    )
    body = b"".join(v.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
                    for v in state.values())
    Path(path).write_bytes(header + body)


def load_checkpoint(path) -> SimilarityPredictor:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise FormatError("checkpoint", f"file not found: {path}") from None
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("magic", f"expected {CHECKPOINT_MAGIC!r}, got {data[:4]!r}")
    size = 5 + 7 * 4
    if len(data) < size:
        raise FormatError("header", "truncated checkpoint header")
    if data[4] != CHECKPOINT_VERSION:
        raise FormatError("version", f"unsupported version {data[4]}")
    *hp_vals, total = struct.unpack_from("<7I", data, 5)
    hp = dict(zip(_HPARAM_ORDER, hp_vals))
    try:
        model = SimilarityPredictor(hp["dim"], hp["n_prompts"], hp["model_dim"],
                                    hp["n_layers"], hp["n_heads"], hp["ff_dim"])
    except InvalidInputError as exc:
        raise FormatError("hyperparameters", str(exc)) from None
    state = model.state_dict()
    expected = sum(v.numel() for v in state.values())
    if total != expected:
        raise FormatError("parameter_count", f"header says {total}, architecture needs {expected}")
    if len(data) - size != 4 * expected:
        raise FormatError("payload", f"expected {4 * expected} bytes, got {len(data) - size}")
    flat = np.frombuffer(data, dtype="<f4", offset=size)
    offset = 0
    new_state = {}
    for name, v in state.items():
        n = v.numel()
        new_state[name] = torch.from_numpy(flat[offset:offset + n].astype(np.float32).reshape(v.shape))
        offset += n
    model.load_state_dict(new_state)
    model.eval()
    return model
