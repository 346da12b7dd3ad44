"""Experiment drivers: dataset generation, training runs, evaluation suites."""

from __future__ import annotations

import logging
import math
from pathlib import Path

import torch

from . import metrics as met
from . import objective as obj
from . import samplers as smp
from . import targets as tgt
from .config import ExperimentConfig
from .flows.model import Flow, build_flow, load_checkpoint
from .trainer import TrainData, Trainer

logger = logging.getLogger("condflow")


class DatasetMissing(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def build_target(cfg: ExperimentConfig):
    exp = cfg.get("experiment", "id")
    t = cfg["target"]
    if exp == "gaussian_toy":
        return tgt.GaussianTemperature(t["dim"], t["c_min"], t["c_max"], t["c0"])
    if exp == "multiwell":
        return tgt.MultiWell(
            t["dim"], t["a"], t["b"], t["c_quartic"], t["c_min"], t["c_max"], t["c0"]
        )
    if exp == "gmm":
        return tgt.PowerScaledGMM(t["c_min"], t["c_max"], t["c0"])
    if exp == "two_moons":
        return tgt.TwoMoonsPosterior(None, t["prior_std"], t["c_min"], t["c_max"], t["c0"])
    if exp == "phi4":
        return tgt.Phi4Lattice(t["lattice_size"], t["quartic"], t["c_min"], t["c_max"], t["c0"])
    raise ValueError(f"unknown experiment {exp!r}")


def arch_dict(cfg: ExperimentConfig) -> dict:
    a = cfg["architecture"]
    latent: dict = {"kind": a["latent"], "dim": a["dim"]}
    if a["latent"] == "power_scaled_normal":
        latent.update({"c0": cfg.get("target", "c0"), "exponent": a["latent_exponent"]})
    elif a["latent"] == "uniform_truncnorm_mix":
        latent.update({"bound": a["latent_bound"], "uniform_weight": 0.5})
    return {
        "dim": a["dim"],
        "n_blocks": a["n_blocks"],
        "coupling": a["coupling"],
        "hidden": a["hidden"],
        "n_bins": a["n_bins"],
        "bound": a["bound"],
        "scale_clamp": a["scale_clamp"],
        "actnorm": a["actnorm"],
        "conditional": a["conditional"],
        "embed_dim": a["embed_dim"],
        "embed_hidden": a["embed_hidden"],
        "context_dim": a["context_dim"],
        "latent": latent,
        "perm_seed": a["perm_seed"],
    }


def build_model(cfg: ExperimentConfig) -> Flow:
    return build_flow(arch_dict(cfg))


# ---------------------------------------------------------------------------
# dataset layout
# ---------------------------------------------------------------------------


def dataset_roles(cfg: ExperimentConfig) -> list[str]:
    exp = cfg.get("experiment", "id")
    conds = cfg.get("evaluation", "conditions")
    if exp == "gaussian_toy":
        return ["train"] + [f"val_{c!r}" for c in conds]
    if exp == "multiwell":
        return ["train", "train_low"] + [f"test_{c!r}" for c in conds]
    if exp == "gmm":
        return ["train"] + [f"val_{c!r}" for c in conds]
    if exp == "two_moons":
        return ["train"] + [f"val_{c!r}" for c in conds]
    if exp == "phi4":
        anchors = cfg.get("sampler", "train_anchors") or [cfg.get("target", "c0")]
        return [f"train_{a!r}" for a in anchors] + [
            f"{role}_{c!r}" for c in conds for role in ("val", "ref")
        ]
    raise ValueError(exp)


def dataset_path(cfg: ExperimentConfig, role: str) -> Path:
    exp = cfg.get("experiment", "id")
    seed = cfg.get("experiment", "data_seed")
    return Path(cfg.get("experiment", "data_dir")) / f"{exp}_{role}_d{seed}.bin"


def load_datasets(cfg: ExperimentConfig) -> dict[str, smp.Dataset]:
    out = {}
    for role in dataset_roles(cfg):
        path = dataset_path(cfg, role)
        if not path.exists():
            raise DatasetMissing(str(path))
        out[role] = smp.Dataset.load(path)
    return out


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------


def _gen(seed: int, salt: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed * 9973 + salt)


def _multiwell_samples(target, c, n, cfg, generator):
    s = cfg["sampler"]
    centers = target.basin_centers()
    n_chains = max(s["n_chains"], centers.shape[0])
    reps = int(math.ceil(n_chains / centers.shape[0]))
    init = centers.repeat(reps, 1)[:n_chains]
    init = init + 0.05 * torch.randn(init.shape, dtype=torch.float64, generator=generator)
    kept_per_chain = int(math.ceil(n / n_chains))
    n_steps = s["burn_in"] + kept_per_chain * s["thin_stride"]
    states, info = smp.metropolis_run(
        target, c, n_chains, n_steps, s["step_size"], init, generator,
        burn_in=s["burn_in"], thin_stride=s["thin_stride"],
    )
    flat = states.transpose(0, 1).reshape(-1, target.dim)[:n]
    return flat, info


def _phi4_reference_samples(target, kappa, n, cfg, generator, stride=4):
    s = cfg["sampler"]
    n_chains = s["n_chains"]
    kept_per_chain = int(math.ceil(n / n_chains))
    n_sweeps = s["burn_in"] + kept_per_chain * stride
    states, info = smp.lattice_metropolis_run(
        target, kappa, n_chains, n_sweeps, s["step_size"], generator,
        burn_in=s["burn_in"], thin_stride=stride,
    )
    return states.transpose(0, 1).reshape(-1, target.dim)[:n], info


def generate_datasets(cfg: ExperimentConfig, verbose: bool = True) -> dict[str, smp.Dataset]:
    """Write every dataset role for the experiment; returns them keyed by role."""
    exp = cfg.get("experiment", "id")
    seed = cfg.get("experiment", "data_seed")
    s = cfg["sampler"]
    conds = cfg.get("evaluation", "conditions")
    target = build_target(cfg)
    data_dir = Path(cfg.get("experiment", "data_dir"))
    data_dir.mkdir(parents=True, exist_ok=True)
    out: dict[str, smp.Dataset] = {}

    def store(role: str, samples: torch.Tensor, c: float, extra: dict | None = None):
        prov = {"experiment": exp, "role": role, "seed": seed, "sampler": dict(s)}
        prov.update(extra or {})
        ds = smp.Dataset(samples, float(c), prov)
        ds.save(dataset_path(cfg, role))
        out[role] = ds
        if verbose:
            msg = f"{role}: n={ds.n} d={ds.dim} c={c}"
            for k in ("acceptance", "tau", "stride"):
                if k in prov:
                    msg += f" {k}={prov[k]:.4g}" if isinstance(prov[k], float) else f" {k}={prov[k]}"
            logger.info(msg)

    if exp == "gaussian_toy":
        store("train", target.exact_sample(s["n_train"], target.c0, _gen(seed, 1)), target.c0)
        for i, c in enumerate(conds):
            store(f"val_{c!r}", target.exact_sample(s["n_val"], c, _gen(seed, 100 + i)), c)
    elif exp == "multiwell":
        x, info = _multiwell_samples(target, target.c0, s["n_train"], cfg, _gen(seed, 1))
        store("train", x, target.c0, {"acceptance": info["acceptance"]})
        low_c = min(conds)
        x, info = _multiwell_samples(target, low_c, s["n_train"] // 10, cfg, _gen(seed, 2))
        store("train_low", x, low_c, {"acceptance": info["acceptance"]})
        for i, c in enumerate(conds):
            x, info = _multiwell_samples(target, c, s["n_test"], cfg, _gen(seed, 200 + i))
            store(f"test_{c!r}", x, c, {"acceptance": info["acceptance"]})
    elif exp == "gmm":
        store("train", target.exact_sample(s["n_train"], target.c0, _gen(seed, 1)), target.c0)
        for i, c in enumerate(conds):
            x = smp.rejection_sample_power_gmm(
                target, c, s["n_val"], _gen(seed, 300 + i), noise_std=s["noise_std"]
            )
            store(f"val_{c!r}", x, c)
    elif exp == "two_moons":
        gen = _gen(seed, 1)
        psi = target.sample_prior(s["n_train"], gen)
        y = tgt.two_moons_simulate(psi, target.c0, gen)
        store("train", torch.cat([psi, y], dim=-1), target.c0, {"context_dim": 2})
        for i, c in enumerate(conds):
            gen = _gen(seed, 400 + i)
            psi = target.sample_prior(s["n_val"], gen)
            y = tgt.two_moons_simulate(psi, c, gen)
            store(f"val_{c!r}", torch.cat([psi, y], dim=-1), c, {"context_dim": 2})
    elif exp == "phi4":
        anchors = s["train_anchors"] or [target.c0]
        for i, kappa in enumerate(anchors):
            gen = _gen(seed, 1 + i)
            chains, _ = smp.langevin_run(
                target, kappa, s["n_chains"], s["n_steps"], s["dt"], gen,
                burn_in=s["burn_in"], thin_stride=1,
            )
            ds = smp.thin_by_autocorrelation(
                chains, lambda x: x.sum(dim=-1).abs() / target.dim, kappa,
                {"experiment": exp, "role": f"train_{kappa!r}", "seed": seed},
            )
            n = min(ds.n, s["n_train"])
            store(f"train_{kappa!r}", ds.samples[:n], kappa,
                  {"tau": ds.provenance["tau"], "stride": ds.provenance["stride"]})
        for i, kappa in enumerate(conds):
            x, info = _phi4_reference_samples(target, kappa, s["n_val"], cfg, _gen(seed, 500 + i))
            store(f"val_{kappa!r}", x, kappa, {"acceptance": info["acceptance"]})
            x, info = _phi4_reference_samples(target, kappa, s["n_test"], cfg, _gen(seed, 600 + i))
            store(f"ref_{kappa!r}", x, kappa, {"acceptance": info["acceptance"]})
    else:
        raise ValueError(exp)
    return out


# ---------------------------------------------------------------------------
# training assembly
# ---------------------------------------------------------------------------


def _augment_8fold(x: torch.Tensor) -> torch.Tensor:
    """Deterministic sign/mirror orbit used to enlarge lattice validation sets."""
    L = int(math.isqrt(x.shape[1]))
    phi = x.reshape(-1, L, L)
    outs = []
    for sign in (1.0, -1.0):
        for fh in (False, True):
            for fv in (False, True):
                t = sign * phi
                if fh:
                    t = torch.flip(t, dims=[-1])
                if fv:
                    t = torch.flip(t, dims=[-2])
                outs.append(t.reshape(x.shape[0], -1))
    return torch.cat(outs, dim=0)


def assemble_training(cfg: ExperimentConfig, datasets: dict, target, model: Flow):
    exp = cfg.get("experiment", "id")
    conds = cfg.get("evaluation", "conditions")
    context_pool = None
    if exp == "two_moons":
        train = datasets["train"]
        x = train.samples[:, :2]
        ctx = train.samples[:, 2:]
        data = TrainData(x, torch.full((train.n,), train.c, dtype=torch.float64), ctx)
        context_pool = ctx
        val_sets = {}
        for c in conds:
            ds = datasets[f"val_{c!r}"]
            val_sets[c] = (ds.samples[:, :2], ds.samples[:, 2:])
    elif exp == "phi4":
        anchors = cfg.get("sampler", "train_anchors") or [target.c0]
        xs, cs = [], []
        for a in anchors:
            ds = datasets[f"train_{a!r}"]
            xs.append(ds.samples)
            cs.append(torch.full((ds.n,), ds.c, dtype=torch.float64))
        data = TrainData(torch.cat(xs), torch.cat(cs))
        val_sets = {c: (_augment_8fold(datasets[f"val_{c!r}"].samples), None) for c in conds}
    elif exp == "multiwell":
        train = datasets["train"]
        data = TrainData(train.samples, torch.full((train.n,), train.c, dtype=torch.float64))
        val_sets = {c: (datasets[f"test_{c!r}"].samples, None) for c in conds}
    else:
        train = datasets["train"]
        data = TrainData(train.samples, torch.full((train.n,), train.c, dtype=torch.float64))
        val_sets = {c: (datasets[f"val_{c!r}"].samples, None) for c in conds}

    ocfg = cfg.objective_config()
    grad_target = None
    if ocfg.energy_free:
        kind = {
            "gaussian_toy": "boltzmann",
            "multiwell": "boltzmann",
            "gmm": "power",
            "two_moons": "tempered_posterior",
            "phi4": "boltzmann",
        }[exp]
        grad_target = obj.ModelDensityTarget(model, kind, target)

    trainer = Trainer(
        model,
        target,
        data,
        ocfg,
        cfg.trainer_config(),
        seed=cfg.get("experiment", "seed"),
        val_sets=val_sets,
        out_dir=cfg.get("experiment", "output_dir"),
        context_pool=context_pool,
        grad_target=grad_target,
    )
    return trainer, data


# ---------------------------------------------------------------------------
# evaluation suites
# ---------------------------------------------------------------------------


def evaluate_model(cfg: ExperimentConfig, model: Flow, datasets: dict) -> met.RunMetrics:
    exp = cfg.get("experiment", "id")
    conds = cfg.get("evaluation", "conditions")
    ev = cfg["evaluation"]
    seed = cfg.get("experiment", "seed")
    target = build_target(cfg)
    rm = met.RunMetrics()
    if exp == "gaussian_toy":
        for i, c in enumerate(conds):
            ds = datasets[f"val_{c!r}"]
            rm.add(c, "nll", met.nll(model, ds.samples, c))
            rm.add(c, "ess", met.relative_ess(model, target, c, ev["ess_samples"], _gen(seed, 700 + i)))
            with torch.no_grad():
                x, _ = model.sample(ev["ess_samples"], c, _gen(seed, 800 + i))
                rm.add(c, "sample_variance", float(x.var(dim=0).mean()))
            g = _gen(seed, 900 + i)
            expv = obj.snis_expectation(model, target, c, 4000, g, p_base="model")
            xg, _ = model.sample(4000, c, g)
            rm.add(c, "grad_loss", float(obj.gradient_loss(model, target, xg, c, expv).detach()))
    elif exp == "multiwell":
        for i, c in enumerate(conds):
            ds = datasets[f"test_{c!r}"]
            rm.add(c, "nll", met.nll(model, ds.samples, c))
            rm.add(c, "ess", met.relative_ess(model, target, c, ev["ess_samples"], _gen(seed, 700 + i)))
    elif exp == "gmm":
        for i, c in enumerate(conds):
            ds = datasets[f"val_{c!r}"]
            kld, err = met.gmm_validation_kld(
                model, target, c, ev["kld_samples"], _gen(seed, 700 + i),
                samples=ds.samples[: ev["kld_samples"]],
            )
            rm.add(c, "kld", kld, err)
            rm.add(c, "nll", met.nll(model, ds.samples, c))
    elif exp == "two_moons":
        for i, c in enumerate(conds):
            curve = met.two_moons_calibration(
                model, c, ev["calibration_pairs"], ev["calibration_draws"],
                _gen(seed, 700 + i), prior_std=cfg.get("target", "prior_std"),
            )
            rm.add(c, "calibration_max_dev", curve.max_deviation())
            mid = len(curve.nominal) // 2
            rm.add(c, "calibration_mid_signed", float(curve.empirical[mid] - curve.nominal[mid]))
            for a, e in zip(curve.nominal, curve.empirical):
                rm.add(c, f"coverage@{a:.2f}", float(e))
            ds = datasets[f"val_{c!r}"]
            rm.add(c, "nll", met.nll(model, ds.samples[:, :2], c, ds.samples[:, 2:]))
    elif exp == "phi4":
        for i, c in enumerate(conds):
            ref = datasets[f"ref_{c!r}"]
            with torch.no_grad():
                x, _ = model.sample(ev["observable_samples"], c, _gen(seed, 700 + i))
            rep_m = met.lattice_observables(x, target, c, seed=seed + i)
            rep_r = met.lattice_observables(ref.samples, target, c, seed=seed + 91 + i)
            for name in rep_m.values:
                rm.add(c, name, rep_m.value(name), rep_m.err(name))
                rm.add(c, f"ref_{name}", rep_r.value(name), rep_r.err(name))
            rm.add(c, "ess", met.relative_ess(model, target, c, ev["ess_samples"], _gen(seed, 800 + i)))
            rm.add(c, "nll", met.nll(model, _augment_8fold(datasets[f"val_{c!r}"].samples), c))
    else:
        raise ValueError(exp)
    return rm


def write_wide_table(rm: met.RunMetrics, path) -> None:
    """One-row CSV with metric@condition columns (ablation-table shape)."""
    cols: dict[str, float] = {}
    for r in rm.rows:
        cols[f"{r['metric']}@{r['condition']!r}"] = r["value"]
    with open(path, "w") as fh:
        fh.write(",".join(cols.keys()) + "\n")
        fh.write(",".join(repr(v) for v in cols.values()) + "\n")


# ---------------------------------------------------------------------------
# run orchestration
# ---------------------------------------------------------------------------


def run_experiment(cfg: ExperimentConfig, generate_if_missing: bool = False) -> dict:
    torch.set_num_threads(cfg.get("experiment", "threads"))
    try:
        datasets = load_datasets(cfg)
    except DatasetMissing:
        if not generate_if_missing:
            raise
        datasets = generate_datasets(cfg, verbose=False)
    target = build_target(cfg)
    model = build_model(cfg)
    out_dir = Path(cfg.get("experiment", "output_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)

    trainer, data = assemble_training(cfg, datasets, target, model)
    init_batch = data.x[: min(cfg.get("trainer", "batch_size"), data.n)]
    init_ctx = data.context[: init_batch.shape[0]] if data.context is not None else None
    model.initialize_actnorm(init_batch, data.c[: init_batch.shape[0]], init_ctx)

    summary = trainer.run()
    cfg.save(out_dir / "manifest.ini")

    best = load_checkpoint(out_dir / "best.ckpt")
    rm = evaluate_model(cfg, best, datasets)
    rm.write_csv(out_dir / "metrics.csv")
    rm.write_json(out_dir / "metrics.json")
    write_wide_table(rm, out_dir / "table.csv")
    summary["metrics"] = rm
    return summary
