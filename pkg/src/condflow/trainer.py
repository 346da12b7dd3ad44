"""Optimization loop: Adam with a one-cycle schedule, gradient clipping,
warmup then full objective, periodic validation and best-model selection."""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import objective as obj
from .flows.blocks import NonFiniteActivation
from .flows.model import Flow, save_checkpoint
from .flows.splines import SplineInversionFailure
from .samplers import augment_lattice

logger = logging.getLogger("condflow")


class MissingValidationSet(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainerConfig:
    total_steps: int = 2000
    batch_size: int = 256
    lr: float = 2e-4
    weight_decay: float = 0.0
    grad_clip: float = 3.0
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    two_phase: bool = False
    gamma_lr: float = 1.0
    val_interval: int = 500
    augment_data: bool = False
    dequant_noise: float = 0.0
    max_skips: int = 50

    def validate(self) -> list[str]:
        errors = []
        if self.total_steps < 1:
            errors.append("total_steps must be >= 1")
        if not 0.0 < self.pct_start < 1.0:
            errors.append("pct_start must be in (0, 1)")
        if self.grad_clip <= 0:
            errors.append("grad_clip must be positive")
        return errors


def one_cycle_lr(
    step: int,
    total_steps: int,
    max_lr: float,
    pct_start: float = 0.3,
    div_factor: float = 25.0,
    final_div_factor: float = 1e4,
) -> float:
    """Cosine-interpolated one-cycle schedule; peak at pct_start * total_steps."""
    peak_step = max(int(pct_start * total_steps), 1)
    lr0 = max_lr / div_factor
    lr_end = max_lr / final_div_factor
    if step <= peak_step:
        frac = step / peak_step
        return lr0 + (max_lr - lr0) * 0.5 * (1.0 - math.cos(math.pi * frac))
    frac = (step - peak_step) / max(total_steps - peak_step, 1)
    return lr_end + (max_lr - lr_end) * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))


@dataclass
class TrainData:
    """Row-wise training pool: per-row condition and optional context."""

    x: torch.Tensor
    c: torch.Tensor
    context: torch.Tensor | None = None

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass
class ValidationRecord:
    step: int
    per_condition: dict
    mean_nll: float


class Trainer:
    """Owns the model parameters during training; single-threaded updates."""

    def __init__(
        self,
        model: Flow,
        target,
        data: TrainData | None,
        obj_cfg: obj.ObjectiveConfig,
        tr_cfg: TrainerConfig,
        seed: int = 0,
        val_sets: dict | None = None,
        out_dir: str | Path | None = None,
        context_pool: torch.Tensor | None = None,
        grad_target=None,
    ):
        errs = obj_cfg.validate() + tr_cfg.validate()
        if errs:
            raise ValueError("; ".join(errs))
        self.model = model
        self.target = target
        self.data = data
        self.cfg = obj_cfg
        self.tcfg = tr_cfg
        self.seed = seed
        self.val_sets = val_sets or {}
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.context_pool = context_pool
        # target used inside the gradient penalty; the energy-free mode
        # substitutes a model-estimated target here
        self.grad_target = grad_target if grad_target is not None else target

        self.generator = torch.Generator().manual_seed(seed)
        self.params = [p for p in model.parameters() if p.requires_grad]
        self.optimizer = torch.optim.Adam(
            self.params,
            lr=tr_cfg.lr,
            betas=(0.9, 0.999),
            eps=1e-8,
            weight_decay=tr_cfg.weight_decay,
        )
        self.balancer = obj.BalancerState(
            lambda_fixed=obj_cfg.lambda_fixed,
            alpha=obj_cfg.alpha_balance,
            interval=obj_cfg.balance_interval,
            cached=obj_cfg.lambda_fixed,
        )
        self.grid: obj.ConditionGrid | None = None
        if obj_cfg.use_gradient_loss and obj_cfg.discretize:
            anchors = sorted(set(self.anchor_conditions()))
            self.grid = obj.ConditionGrid(
                target.c_min,
                target.c_max,
                obj_cfg.n_grid,
                anchors,
                epsilon=obj_cfg.epsilon,
                gamma_epsilon=obj_cfg.gamma_epsilon,
                r_epsilon=obj_cfg.r_epsilon,
            )
        self.step_index = 0
        self.consecutive_skips = 0
        self.best_val = math.inf
        self.log_rows: list[dict] = []
        self.val_records: list[ValidationRecord] = []

    # -- helpers -------------------------------------------------------------

    def anchor_conditions(self) -> list[float]:
        if self.data is None:
            return [self.target.c0]
        return [float(v) for v in torch.unique(self.data.c)]

    def lr_at(self, step: int) -> float:
        t = self.tcfg
        if t.two_phase and self.cfg.warmup_steps > 0:
            w = min(self.cfg.warmup_steps, t.total_steps)
            if step < w:
                return one_cycle_lr(step, w, t.lr, t.pct_start, t.div_factor, t.final_div_factor)
            return one_cycle_lr(
                step - w,
                t.total_steps - w,
                t.lr * t.gamma_lr,
                t.pct_start,
                t.div_factor,
                t.final_div_factor,
            )
        return one_cycle_lr(step, t.total_steps, t.lr, t.pct_start, t.div_factor, t.final_div_factor)

    def _batch(self):
        idx = torch.randint(0, self.data.n, (min(self.tcfg.batch_size, self.data.n),),
                            generator=self.generator)
        x = self.data.x[idx]
        c = self.data.c[idx]
        ctx = self.data.context[idx] if self.data.context is not None else None
        if self.tcfg.augment_data:
            x = augment_lattice(x, self.generator)
        if self.tcfg.dequant_noise > 0:
            x = x + self.tcfg.dequant_noise * torch.randn(
                x.shape, dtype=torch.float64, generator=self.generator
            )
        return x, c, ctx

    def _sample_log_uniform_c(self, n: int) -> torch.Tensor:
        lo, hi = math.log(self.target.c_min), math.log(self.target.c_max)
        u = torch.rand(n, dtype=torch.float64, generator=self.generator)
        return torch.exp(lo + (hi - lo) * u)

    # -- loss terms ----------------------------------------------------------

    def boundary_term(self) -> torch.Tensor:
        kind = self.cfg.boundary
        if kind in ("nll", "nll+backward_kl"):
            x, c, ctx = self._batch()
            return obj.nll_loss(self.model, x, c, ctx)
        if kind == "backward_kl":
            cs = self._sample_log_uniform_c(self.tcfg.batch_size)
            return obj.backward_kl_loss(
                self.model, self.target, cs, self.tcfg.batch_size, self.generator
            )
        if kind == "reweighted":
            x, _, ctx = self._batch()
            c = float(self._sample_log_uniform_c(1))
            return obj.reweighted_nll_loss(self.model, self.target, x, c, self.target.c0, ctx)
        raise ValueError(f"unknown boundary loss {kind!r}")

    def _grad_phase(self) -> tuple[int, int]:
        start = self.cfg.warmup_steps
        return self.step_index - start, max(self.tcfg.total_steps - start, 1)

    def _sample_conditions(self) -> tuple[torch.Tensor, torch.Tensor | None]:
        n_c = self.cfg.grad_conditions_per_step
        if self.grid is not None:
            t, t_max = self._grad_phase()
            eps = self.grid.epsilon_at(t, t_max)
            idx, cs = self.grid.sample(n_c, self.generator, eps)
            return cs, idx
        t, t_max = self._grad_phase()
        cs = torch.tensor(
            [
                obj.sample_condition_continuous(
                    t,
                    t_max,
                    self.target.c0,
                    self.target.c_min,
                    self.target.c_max,
                    self.cfg.s_min,
                    self.cfg.s_max,
                    self.generator,
                )
                for _ in range(n_c)
            ],
            dtype=torch.float64,
        )
        return cs, None

    def _amortized_expectation(self, c: float, ctx: torch.Tensor) -> torch.Tensor:
        """Per-context SNIS estimate of E_p[d/dc log q] (amortized targets)."""
        k = ctx.shape[0]
        m = self.cfg.snis_per_context
        rep = ctx.repeat_interleave(m, dim=0)
        with torch.no_grad():
            xs, logp = self.model.sample(k * m, c, self.generator, rep)
            logw = (self.grad_target.log_q(xs, c, rep) - logp).reshape(k, m)
            w = obj.stable_softmax(logw, dim=1)
            g = self.grad_target.dlogq_dc(xs, c, rep).reshape(k, m)
            return (w * g).sum(dim=1)

    def gradient_term(self) -> tuple[torch.Tensor, dict]:
        cfg = self.cfg
        cs, grid_idx = self._sample_conditions()
        k = cfg.grad_points_per_condition
        xs, c_rows, exp_rows, ctx_rows, idx_rows = [], [], [], [], []
        for j in range(cs.shape[0]):
            c = float(cs[j])
            ctx = None
            if self.context_pool is not None:
                sel = torch.randint(0, self.context_pool.shape[0], (k,), generator=self.generator)
                ctx = self.context_pool[sel]
            with torch.no_grad():
                x, _ = self.model.sample(k, c, self.generator, ctx)
                if cfg.sigma_noise > 0:
                    x = x + cfg.sigma_noise * torch.randn(
                        x.shape, dtype=torch.float64, generator=self.generator
                    )
                if cfg.augment_eval_points:
                    x = augment_lattice(x, self.generator)
            if ctx is not None:
                exp = self._amortized_expectation(c, ctx)
            elif self.grid is not None:
                exp = self.grid.nabla_bar[grid_idx[j]].expand(k).clone()
            else:
                exp = torch.full(
                    (k,),
                    obj.snis_expectation(
                        self.model,
                        self.grad_target,
                        c,
                        cfg.snis_samples,
                        self.generator,
                        p_base=cfg.p_base,
                        c0=self.target.c0,
                    ),
                    dtype=torch.float64,
                )
            xs.append(x)
            c_rows.append(torch.full((k,), c, dtype=torch.float64))
            exp_rows.append(exp)
            idx_rows.append(
                torch.full((k,), int(grid_idx[j]) if grid_idx is not None else 0, dtype=torch.long)
            )
            if ctx is not None:
                ctx_rows.append(ctx)
        x_all = torch.cat(xs)
        c_all = torch.cat(c_rows)
        exp_all = torch.cat(exp_rows)
        ctx_all = torch.cat(ctx_rows) if ctx_rows else None
        penalties = obj.gradient_residuals(
            self.model, self.grad_target, x_all, c_all, exp_all, ctx_all, cfg.huber_delta
        )
        if self.grid is not None:
            means, mask = obj.gradient_residual_stats(
                penalties.detach(), torch.cat(idx_rows), self.grid.n_points
            )
            self.grid.update_loss(torch.cat(idx_rows), means, mask, cfg.alpha_grad)
        info = {"c_mean": float(c_all.mean())}
        return penalties.mean(), info

    # -- training ------------------------------------------------------------

    def _second_term(self) -> tuple[torch.Tensor, dict] | None:
        """The balanced second objective: gradient penalty or backward KL."""
        if self.cfg.boundary == "nll+backward_kl":
            cs = self._sample_log_uniform_c(self.cfg.backward_kl_samples)
            loss = obj.backward_kl_loss(
                self.model, self.target, cs, self.cfg.backward_kl_samples, self.generator
            )
            return loss, {"c_mean": float(cs.mean())}
        if self.cfg.use_gradient_loss and self.step_index >= self.cfg.warmup_steps:
            self._maybe_update_expectations()
            return self.gradient_term()
        return None

    def _maybe_update_expectations(self):
        if self.grid is None:
            return
        t, _ = self._grad_phase()
        if t % self.cfg.expectation_interval == 0 or not bool(self.grid.nabla_initialized.all()):
            obj.update_grid_expectations(
                self.grid,
                self.model,
                self.grad_target,
                self.cfg.expectation_samples,
                self.generator,
                self.cfg.alpha_expectation,
                p_base=self.cfg.p_base,
                c0=self.target.c0,
            )

    def _grad_norm(self, loss: torch.Tensor) -> float:
        grads = torch.autograd.grad(loss, self.params, retain_graph=True, allow_unused=True)
        total = 0.0
        for g in grads:
            if g is not None:
                total += float((g * g).sum())
        return math.sqrt(total)

    def train_step(self) -> dict:
        lr = self.lr_at(self.step_index)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        row = {
            "step": self.step_index,
            "lr": lr,
            "loss_boundary": math.nan,
            "loss_grad": math.nan,
            "lambda": math.nan,
            "c_sampled": math.nan,
            "skipped": 0,
        }
        try:
            loss_b = self.boundary_term()
            second = self._second_term()
            if second is not None:
                loss_g, info = second
                row["c_sampled"] = info.get("c_mean", math.nan)
                if self.cfg.balance:
                    t, _ = self._grad_phase()
                    if not self.balancer.initialized or t % self.balancer.interval == 0:
                        nb = self._grad_norm(loss_b)
                        ng = self._grad_norm(loss_g)
                        obj.balance_weights(nb, ng, self.balancer)
                    lam = self.balancer.current()
                else:
                    lam = self.cfg.lambda_fixed
                total = loss_b + lam * loss_g
                row["loss_grad"] = float(loss_g.detach())
                row["lambda"] = lam
            else:
                total = loss_b
            row["loss_boundary"] = float(loss_b.detach())
            if not torch.isfinite(total):
                raise NonFiniteActivation(-1, "loss")
            self.optimizer.zero_grad(set_to_none=True)
            total.backward()
            torch.nn.utils.clip_grad_norm_(self.params, self.tcfg.grad_clip)
            self.optimizer.step()
            self.consecutive_skips = 0
        except (NonFiniteActivation, SplineInversionFailure) as exc:
            self.optimizer.zero_grad(set_to_none=True)
            self.consecutive_skips += 1
            row["skipped"] = 1
            logger.warning("skipped step %d: %s", self.step_index, exc)
            if self.consecutive_skips > self.tcfg.max_skips:
                raise TrainingDiverged(
                    f"{self.consecutive_skips} consecutive non-finite steps"
                ) from exc
        self.log_rows.append(row)
        self.step_index += 1
        return row

    def validate(self) -> ValidationRecord:
        if not self.val_sets:
            raise MissingValidationSet("no validation sets configured")
        per_c = {}
        with torch.no_grad():
            for c, payload in self.val_sets.items():
                x, ctx = payload if isinstance(payload, tuple) else (payload, None)
                per_c[c] = float(-self.model.log_prob(x, c, ctx).mean())
        rec = ValidationRecord(self.step_index, per_c, sum(per_c.values()) / len(per_c))
        self.val_records.append(rec)
        if rec.mean_nll < self.best_val:
            self.best_val = rec.mean_nll
            if self.out_dir is not None:
                save_checkpoint(self.model, self.out_dir / "best.ckpt")
        return rec

    def run(self) -> dict:
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        while self.step_index < self.tcfg.total_steps:
            self.train_step()
            if self.val_sets and self.step_index % self.tcfg.val_interval == 0:
                self.validate()
        if self.val_sets:
            self.validate()
        if self.out_dir is not None:
            save_checkpoint(self.model, self.out_dir / "final.ckpt")
            if not self.val_sets:
                save_checkpoint(self.model, self.out_dir / "best.ckpt")
            self.write_logs()
        return {
            "steps": self.step_index,
            "best_val_nll": self.best_val if self.val_sets else math.nan,
        }

    # -- persistence ---------------------------------------------------------

    def write_logs(self) -> None:
        if self.out_dir is None:
            return
        buf = io.StringIO()
        buf.write("step,lr,loss_boundary,loss_grad,lambda,c_sampled,skipped\n")
        for r in self.log_rows:
            buf.write(
                f"{r['step']},{r['lr']!r},{r['loss_boundary']!r},{r['loss_grad']!r},"
                f"{r['lambda']!r},{r['c_sampled']!r},{r['skipped']}\n"
            )
        (self.out_dir / "train_log.csv").write_text(buf.getvalue())
        buf = io.StringIO()
        buf.write("step,condition,nll\n")
        for rec in self.val_records:
            for c, v in sorted(rec.per_condition.items()):
                buf.write(f"{rec.step},{c!r},{v!r}\n")
            buf.write(f"{rec.step},mean,{rec.mean_nll!r}\n")
        (self.out_dir / "validation.csv").write_text(buf.getvalue())

    def save_state(self, path) -> None:
        """Full resume state: bit-identical continuation."""
        torch.save(
            {
                "model": self.model.state_dict(),
                "optimizer": self.optimizer.state_dict(),
                "generator": self.generator.get_state(),
                "step": self.step_index,
                "balancer": self.balancer.__dict__,
                "grid": None
                if self.grid is None
                else {
                    "nabla_bar": self.grid.nabla_bar,
                    "nabla_initialized": self.grid.nabla_initialized,
                    "loss_ema": self.grid.loss_ema,
                    "loss_initialized": self.grid.loss_initialized,
                },
                "best_val": self.best_val,
                "skips": self.consecutive_skips,
            },
            path,
        )

    def load_state(self, path) -> None:
        state = torch.load(path, weights_only=False)
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.generator.set_state(state["generator"])
        self.step_index = state["step"]
        for k, v in state["balancer"].items():
            setattr(self.balancer, k, v)
        if state["grid"] is not None and self.grid is not None:
            self.grid.nabla_bar = state["grid"]["nabla_bar"]
            self.grid.nabla_initialized = state["grid"]["nabla_initialized"]
            self.grid.loss_ema = state["grid"]["loss_ema"]
            self.grid.loss_initialized = state["grid"]["loss_initialized"]
        self.best_val = state["best_val"]
        self.consecutive_skips = state["skips"]
