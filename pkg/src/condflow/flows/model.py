"""Conditional flow model: block composition, likelihood, sampling, checkpoints."""

from __future__ import annotations

import json
import struct
from typing import Optional

import torch
import torch.nn as nn

from ..autodiff import primal
from .blocks import (
    ActNorm,
    AffineCoupling,
    ConditionEmbedding,
    FixedPermutation,
    NonFiniteActivation,
    SplineCoupling,
    VolumePreservingCoupling,
)
from .latents import latent_from_descriptor

CHECKPOINT_MAGIC = b"CNDFLOW1"
CHECKPOINT_VERSION = 1


class ArchitectureMismatch(RuntimeError):
    """Checkpoint architecture does not match what the caller expects."""


class Flow(nn.Module):
    """Invertible map f: x -> z with a conditional latent density.

    log p(x|c) = log p_z(f(x;c)|c) + log|det df/dx|. The condition enters the
    coupling subnets through an embedding of log c (and an optional extra
    context vector, e.g. an observation in amortized inference).
    """

    def __init__(self, arch: dict):
        super().__init__()
        self.arch = dict(arch)
        self.dim = arch["dim"]
        self.conditional = arch.get("conditional", True)
        self.context_dim = arch.get("context_dim", 0)
        self.latent = latent_from_descriptor(arch["latent"])

        if self.conditional:
            self.embed = ConditionEmbedding(
                arch.get("embed_dim", 1), arch.get("embed_hidden", [])
            )
            cond_dim = self.embed.embed_dim + self.context_dim
        else:
            self.embed = None
            cond_dim = self.context_dim

        blocks: list[nn.Module] = []
        hidden = list(arch.get("hidden", [64, 64]))
        coupling = arch.get("coupling", "spline")
        n_blocks = arch["n_blocks"]
        perm_seed = arch.get("perm_seed", 0)
        for i in range(n_blocks):
            if arch.get("actnorm", True):
                blocks.append(ActNorm(self.dim))
            if coupling == "spline":
                blocks.append(
                    SplineCoupling(
                        self.dim,
                        cond_dim,
                        hidden,
                        n_bins=arch.get("n_bins", 8),
                        bound=arch.get("bound", 3.0),
                    )
                )
            elif coupling == "affine":
                blocks.append(
                    AffineCoupling(self.dim, cond_dim, hidden, arch.get("scale_clamp", 2.0))
                )
            elif coupling == "volume_preserving":
                blocks.append(
                    VolumePreservingCoupling(
                        self.dim, cond_dim, hidden, arch.get("scale_clamp", 2.0)
                    )
                )
            else:
                raise ValueError(f"unknown coupling type {coupling!r}")
            if self.dim > 1 and i < n_blocks - 1:
                blocks.append(FixedPermutation(self.dim, perm_seed + i))
        self.blocks = nn.ModuleList(blocks)

    # -- conditioning -------------------------------------------------------

    def _as_condition(self, c, n: int) -> torch.Tensor:
        c_t = c if isinstance(c, torch.Tensor) else torch.tensor(float(c), dtype=torch.float64)
        if c_t.dim() == 0:
            c_t = c_t.expand(n)
        return c_t

    def _cond_vector(self, c_t: torch.Tensor, context: Optional[torch.Tensor]):
        parts = []
        if self.embed is not None:
            parts.append(self.embed(c_t))
        if self.context_dim:
            if context is None:
                raise ValueError("flow requires a context vector")
            parts.append(context)
        if not parts:
            return None
        return torch.cat(parts, dim=-1)

    # -- bijection ----------------------------------------------------------

    def forward(self, x: torch.Tensor, c, context: Optional[torch.Tensor] = None):
        c_t = self._as_condition(c, x.shape[0])
        cond = self._cond_vector(c_t, context)
        log_det = torch.zeros(x.shape[0], dtype=torch.float64)
        for i, block in enumerate(self.blocks):
            x, ld = block.forward(x, cond)
            if not bool(torch.isfinite(primal(x)).all()):
                raise NonFiniteActivation(i, "forward")
            log_det = log_det + ld
        return x, log_det

    def inverse(self, z: torch.Tensor, c, context: Optional[torch.Tensor] = None):
        c_t = self._as_condition(c, z.shape[0])
        cond = self._cond_vector(c_t, context)
        log_det = torch.zeros(z.shape[0], dtype=torch.float64)
        for i, block in enumerate(reversed(self.blocks)):
            z, ld = block.inverse(z, cond)
            if not bool(torch.isfinite(primal(z)).all()):
                raise NonFiniteActivation(len(self.blocks) - 1 - i, "inverse")
            log_det = log_det + ld
        return z, log_det

    def log_prob(self, x: torch.Tensor, c, context: Optional[torch.Tensor] = None):
        c_t = self._as_condition(c, x.shape[0])
        z, log_det = self.forward(x, c_t, context)
        return self.latent.log_prob(z, c_t) + log_det

    def sample(
        self,
        n: int,
        c,
        generator: torch.Generator,
        context: Optional[torch.Tensor] = None,
    ):
        """Draw samples and their log-density without recomputation."""
        c_t = self._as_condition(c, n)
        z = self.latent.sample(n, c_t, generator)
        log_pz = self.latent.log_prob(z, c_t)
        x, log_det_inv = self.inverse(z, c_t, context)
        return x, log_pz - log_det_inv

    # -- maintenance --------------------------------------------------------

    def initialize_actnorm(self, batch: torch.Tensor, c, context=None) -> None:
        """Data-dependent init: each ActNorm sees the batch as transformed so far."""
        with torch.no_grad():
            c_t = self._as_condition(c, batch.shape[0])
            cond = self._cond_vector(c_t, context)
            x = batch
            for block in self.blocks:
                if isinstance(block, ActNorm) and not bool(block.initialized):
                    block.initialize_from(x)
                x, _ = block.forward(x, cond)

    def actnorm_state(self) -> list[bool]:
        return [bool(b.initialized) for b in self.blocks if isinstance(b, ActNorm)]

    def set_actnorm_state(self, flags: list[bool]) -> None:
        acts = [b for b in self.blocks if isinstance(b, ActNorm)]
        for b, f in zip(acts, flags):
            b.initialized.fill_(bool(f))


def build_flow(arch: dict) -> Flow:
    return Flow(arch)


# ---------------------------------------------------------------------------
# checkpoint io: versioned binary, header + little-endian float64 parameters
# ---------------------------------------------------------------------------


def save_checkpoint(model: Flow, path) -> None:
    params = [p.detach().to(torch.float64) for _, p in sorted(model.named_parameters())]
    flat = torch.cat([p.reshape(-1) for p in params]) if params else torch.zeros(0)
    header = {
        "arch": model.arch,
        "state": {"actnorm_initialized": model.actnorm_state()},
        "n_params": int(flat.numel()),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(flat.numpy().astype("<f8").tobytes())


def load_checkpoint(path, expected_arch: dict | None = None) -> Flow:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a flow checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        raw = fh.read(8 * header["n_params"])
    if expected_arch is not None and header["arch"] != expected_arch:
        raise ArchitectureMismatch("checkpoint architecture differs from the requested one")
    model = build_flow(header["arch"])
    flat = torch.frombuffer(bytearray(raw), dtype=torch.float64).clone()
    offset = 0
    with torch.no_grad():
        for _, p in sorted(model.named_parameters()):
            n = p.numel()
            p.copy_(flat[offset : offset + n].reshape(p.shape))
            offset += n
    model.set_actnorm_state(header["state"]["actnorm_initialized"])
    return model
