"""Sequential hyperparameter search: univariate TPE sampling, median pruning,
a crash-resumable journal, history and importance reports.

The sampler treats every parameter independently. Completed trials are
split at the ``gamma`` quantile of their objective into a good and a bad
set; per parameter a Parzen estimator is fitted to each set and the
candidate (drawn from the good estimator) with the largest good/bad
density ratio wins. Conditional parameters (per-layer widths) only learn
from trials in which they were active.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence
from urllib.parse import quote, unquote

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import ConfigError, FormatError, InsufficientDataError
from .models import AUWaveConfig

RUNNING, COMPLETE, PRUNED, FAILED = "running", "complete", "pruned", "failed"
STATES = (RUNNING, COMPLETE, PRUNED, FAILED)


class TrialPruned(Exception):
    """Raised inside an objective to stop a trial the pruner rejected."""


# ------------------------------------------------------------------ space
@dataclass(frozen=True)
class Dim:
    """One searchable parameter.

    ``kind`` is ``float``, ``int`` or ``cat``. Integer dims are sampled on the
    lattice ``low, low + step, ..., high``. ``active_if=(name, k)`` makes the
    dim conditional: it exists only when ``params[name] > k``.
    """

    name: str
    kind: str
    low: float = 0.0
    high: float = 0.0
    log: bool = False
    step: int = 1
    choices: tuple = ()
    active_if: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in ("float", "int", "cat"):
            raise ConfigError(f"{self.name}: unknown dim kind {self.kind!r}")
        if self.kind == "cat":
            if not self.choices:
                raise ConfigError(f"{self.name}: categorical dim needs choices")
            return
        if not self.low <= self.high:
            raise ConfigError(f"{self.name}: low > high")
        if self.log and self.low <= 0:
            raise ConfigError(f"{self.name}: log scale needs a positive lower bound")
        if self.kind == "int" and (self.low % self.step or self.high % self.step):
            raise ConfigError(f"{self.name}: bounds must be multiples of step {self.step}")

    def is_active(self, params: dict) -> bool:
        if self.active_if is None:
            return True
        parent, k = self.active_if
        return parent in params and params[parent] > k

    def contains(self, value) -> bool:
        if self.kind == "cat":
            return value in self.choices
        if self.kind == "int":
            return (isinstance(value, (int, np.integer)) and self.low <= value <= self.high
                    and value % self.step == 0)
        return self.low <= value <= self.high

    # internal coordinate: log for log dims, lattice index for ints
    def to_internal(self, value) -> float:
        if self.kind == "int":
            return (value - self.low) / self.step
        return math.log(value) if self.log else float(value)

    def from_internal(self, u: float):
        if self.kind == "int":
            k = int(round(min(max(u, 0.0), self.n_levels - 1)))
            return int(self.low + k * self.step)
        v = math.exp(u) if self.log else u
        return min(max(v, self.low), self.high)

    @property
    def n_levels(self) -> int:
        return int((self.high - self.low) // self.step) + 1

    @property
    def bounds(self) -> tuple:
        """Internal-coordinate support; ints span half a level beyond each end."""
        if self.kind == "int":
            return -0.5, self.n_levels - 0.5
        return self.to_internal(self.low), self.to_internal(self.high)


@dataclass(frozen=True)
class SearchSpace:
    dims: tuple

    def __post_init__(self):
        if not self.dims:
            raise ConfigError("search space is empty")
        seen = set()
        for d in self.dims:
            if d.active_if is not None and d.active_if[0] not in seen:
                raise ConfigError(f"{d.name}: condition on {d.active_if[0]!r} which is not declared earlier")
            seen.add(d.name)

    @classmethod
    def build(cls, *, mlp_layers=(1, 4), hidden_dim=(128, 4096), latent_dim=(256, 2048),
              unet_blocks=(3, 5), layers_per_block=(1, 3), out_channels=(32, 8192),
              lr=(1e-5, 1e-3), gamma=(0.9, 0.99), attention=(True, False)) -> "SearchSpace":
        dims = [
            Dim("lr", "float", *lr, log=True),
            Dim("gamma", "float", *gamma),
            Dim("mlp_layers", "int", *mlp_layers),
        ]
        dims += [Dim(f"hidden_dim_{i}", "int", *hidden_dim, active_if=("mlp_layers", i))
                 for i in range(mlp_layers[1])]
        dims += [
            Dim("latent_dim", "int", *latent_dim),
            Dim("unet_blocks", "int", *unet_blocks),
            Dim("layers_per_block", "int", *layers_per_block),
        ]
        dims += [Dim(f"out_channels_{i}", "int", *out_channels, step=32, active_if=("unet_blocks", i))
                 for i in range(unet_blocks[1])]
        dims.append(Dim("use_attention", "cat", choices=tuple(attention)))
        return cls(tuple(dims))

    @classmethod
    def full(cls) -> "SearchSpace":
        """The complete search ranges over the full-size architecture."""
        return cls.build()

    @classmethod
    def desk(cls) -> "SearchSpace":
        """A sub-box of the full ranges whose models train in about a minute per epoch."""
        return cls.build(mlp_layers=(1, 2), hidden_dim=(128, 512), latent_dim=(256, 512),
                         unet_blocks=(3, 3), layers_per_block=(1, 1), out_channels=(32, 64))

    def __iter__(self):
        return iter(self.dims)

    @property
    def names(self) -> list:
        return [d.name for d in self.dims]

    def active_dims(self, params: dict) -> list:
        return [d for d in self.dims if d.is_active(params)]

    def validate(self, params: dict) -> None:
        for d in self.dims:
            if d.is_active(params):
                if d.name not in params or not d.contains(params[d.name]):
                    raise ConfigError(f"{d.name}={params.get(d.name)!r} outside the search space")
            elif d.name in params:
                raise ConfigError(f"{d.name} given but inactive")

    def to_configs(self, params: dict, n_stations: int) -> tuple[AUWaveConfig, float, float]:
        """Map flat parameters to (model config, lr, gamma)."""
        cfg = AUWaveConfig(
            n_stations=n_stations,
            mlp_hidden=tuple(params[f"hidden_dim_{i}"] for i in range(params["mlp_layers"])),
            latent_dim=params["latent_dim"],
            unet_blocks=params["unet_blocks"],
            layers_per_block=params["layers_per_block"],
            encoder_channels=tuple(params[f"out_channels_{i}"] for i in range(params["unet_blocks"])),
            use_attention=bool(params["use_attention"]),
        )
        cfg.validate()
        return cfg, float(params["lr"]), float(params["gamma"])


# ------------------------------------------------------------------ trials
@dataclass
class Trial:
    id: int
    params: dict
    state: str = RUNNING
    objective: Optional[float] = None
    intermediate: dict = field(default_factory=dict)
    error: str = ""
    _pruner: Optional[Callable[["Trial", int], bool]] = field(default=None, repr=False, compare=False)

    def report(self, step: int, value: float) -> None:
        self.intermediate[int(step)] = float(value)

    def should_prune(self, step: int) -> bool:
        return self._pruner is not None and self._pruner(self, step)


def prune_decision(completed: Sequence[Trial], trial: Trial, step: int, warmup: int = 5) -> bool:
    """True to prune: the trial's loss at ``step`` is strictly above the median of
    completed trials at that step. No decision before ``warmup`` such trials exist."""
    ref = [t.intermediate[step] for t in completed if t.state == COMPLETE and step in t.intermediate]
    if len(ref) < warmup or step not in trial.intermediate:
        return False
    return trial.intermediate[step] > float(np.median(ref))


# ------------------------------------------------------------------ parzen
class _Parzen1D:
    """Gaussian mixture on a bounded interval with a broad prior component."""

    def __init__(self, obs: np.ndarray, low: float, high: float, prior_weight: float = 1.0):
        span = high - low
        obs = np.sort(np.asarray(obs, dtype=np.float64))
        mus = np.concatenate([[0.5 * (low + high)], obs])
        sig = np.empty_like(mus)
        sig[0] = span
        if obs.size:
            padded = np.concatenate([[low], obs, [high]])
            left = padded[1:-1] - padded[:-2]
            right = padded[2:] - padded[1:-1]
            sig[1:] = np.maximum(left, right)
        lo_bw = span / min(100.0, obs.size + 1.0)
        sig = np.clip(sig, lo_bw, span)
        w = np.concatenate([[prior_weight], np.ones(obs.size)])
        self.mus, self.sigmas, self.weights = mus, sig, w / w.sum()
        self.low, self.high = low, high
        a = (low - mus) / sig
        b = (high - mus) / sig
        self.mass = np.maximum(ndtr(b) - ndtr(a), 1e-300)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        comp = rng.choice(len(self.mus), size=n, p=self.weights)
        mu, sd = self.mus[comp], self.sigmas[comp]
        a = ndtr((self.low - mu) / sd)
        b = ndtr((self.high - mu) / sd)
        u = rng.uniform(a, b)
        x = mu + sd * ndtri(np.clip(u, 1e-300, 1 - 1e-16))
        return np.clip(x, self.low, self.high)

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        z = (x[:, None] - self.mus) / self.sigmas
        dens = np.exp(-0.5 * z * z) / (math.sqrt(2 * math.pi) * self.sigmas * self.mass)
        return np.log(np.maximum(dens @ self.weights, 1e-300))

    def log_bin_mass(self, edges_lo: np.ndarray, edges_hi: np.ndarray) -> np.ndarray:
        """Log probability of each [lo, hi) interval (integer lattice cells)."""
        cdf = lambda e: ndtr((e[:, None] - self.mus) / self.sigmas)
        p = ((cdf(edges_hi) - cdf(edges_lo)) / self.mass) @ self.weights
        return np.log(np.maximum(p, 1e-300))


def _cat_log_probs(values: list, choices: tuple, prior_weight: float = 1.0) -> np.ndarray:
    counts = np.full(len(choices), prior_weight, dtype=np.float64)
    for v in values:
        counts[choices.index(v)] += 1
    return np.log(counts / counts.sum())


# ------------------------------------------------------------------ study
@dataclass
class Study:
    space: SearchSpace
    seed: int = 0
    gamma: float = 0.25
    n_startup: int = 10
    n_candidates: int = 24
    prune_warmup: int = 5
    trials: list = field(default_factory=list)

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ConfigError("gamma quantile must lie in (0, 1)")
        if self.n_candidates < 1 or self.n_startup < 0:
            raise ConfigError("n_candidates must be positive and n_startup non-negative")

    @property
    def completed(self) -> list:
        return [t for t in self.trials if t.state == COMPLETE]

    @property
    def best_trial(self) -> Optional[Trial]:
        done = self.completed
        return min(done, key=lambda t: (t.objective, t.id)) if done else None

    def suggest(self, trial_id: int) -> dict:
        return suggest(self, self.space, trial_id)

    def ask(self) -> Trial:
        tid = len(self.trials)
        t = Trial(tid, self.suggest(tid))
        t._pruner = lambda tr, step: prune_decision(self.trials, tr, step, self.prune_warmup)
        self.trials.append(t)
        return t

    def tell(self, trial: Trial, objective: Optional[float] = None, state: str = COMPLETE,
             error: str = "") -> None:
        if state == COMPLETE:
            if objective is None or not math.isfinite(objective):
                state, error = FAILED, error or f"non-finite objective {objective!r}"
                objective = None
        else:
            objective = None
        trial.state, trial.objective, trial.error = state, objective, error

    def best_so_far(self) -> list:
        out, best = [], math.inf
        for t in self.trials:
            if t.state == COMPLETE:
                best = min(best, t.objective)
            out.append(best if math.isfinite(best) else None)
        return out


def suggest(study: Study, space: SearchSpace, trial_id: int) -> dict:
    """Propose parameters for ``trial_id``; random until ``n_startup`` completions."""
    rng = np.random.default_rng([study.seed, trial_id])
    done = [t for t in study.trials if t.state == COMPLETE]
    if len(done) < study.n_startup:
        return _sample_prior(space, rng)
    ranked = sorted(done, key=lambda t: (t.objective, t.id))
    n_good = max(1, math.ceil(study.gamma * len(ranked)))
    good, bad = ranked[:n_good], ranked[n_good:]
    params: dict = {}
    for d in space.dims:
        if not d.is_active(params):
            continue
        g_vals = [t.params[d.name] for t in good if d.name in t.params]
        b_vals = [t.params[d.name] for t in bad if d.name in t.params]
        params[d.name] = _tpe_one(d, g_vals, b_vals, rng, study.n_candidates)
    return params


def _sample_prior(space: SearchSpace, rng: np.random.Generator) -> dict:
    params: dict = {}
    for d in space.dims:
        if not d.is_active(params):
            continue
        if d.kind == "cat":
            params[d.name] = d.choices[int(rng.integers(len(d.choices)))]
        elif d.kind == "int":
            params[d.name] = int(d.low + d.step * rng.integers(d.n_levels))
        else:
            lo, hi = d.bounds
            params[d.name] = d.from_internal(rng.uniform(lo, hi))
    return params


def _tpe_one(d: Dim, good: list, bad: list, rng: np.random.Generator, n_cand: int):
    if d.kind == "cat":
        lg = _cat_log_probs(good, d.choices)
        lb = _cat_log_probs(bad, d.choices)
        cand = rng.choice(len(d.choices), size=n_cand, p=np.exp(lg))
        score = lg[cand] - lb[cand]
        return d.choices[int(cand[int(np.argmax(score))])]
    lo, hi = d.bounds
    pg = _Parzen1D(np.array([d.to_internal(v) for v in good]), lo, hi)
    pb = _Parzen1D(np.array([d.to_internal(v) for v in bad]), lo, hi)
    raw = pg.sample(rng, n_cand)
    if d.kind == "int":
        k = np.clip(np.round(raw), 0, d.n_levels - 1)
        score = pg.log_bin_mass(k - 0.5, k + 0.5) - pb.log_bin_mass(k - 0.5, k + 0.5)
        return d.from_internal(float(k[int(np.argmax(score))]))
    score = pg.log_pdf(raw) - pb.log_pdf(raw)
    return d.from_internal(float(raw[int(np.argmax(score))]))


# ------------------------------------------------------------------ journal
def _enc(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return f"b:{bool(v)}"
    if isinstance(v, (int, np.integer)):
        return f"i:{int(v)}"
    if isinstance(v, (float, np.floating)):
        return f"f:{float(v)!r}"
    if v is None:
        return "n:"
    raise FormatError(f"cannot journal value {v!r}")


def _dec(s: str):
    tag, _, body = s.partition(":")
    if tag == "b":
        return body == "True"
    if tag == "i":
        return int(body)
    if tag == "f":
        return float(body)
    if tag == "n":
        return None
    raise FormatError(f"bad journal value {s!r}")


def trial_to_line(t: Trial) -> str:
    fields = [f"id={t.id}", f"state={t.state}", f"objective={_enc(t.objective)}"]
    fields += [f"param.{k}={_enc(v)}" for k, v in t.params.items()]
    fields += [f"step.{k}={_enc(v)}" for k, v in sorted(t.intermediate.items())]
    if t.error:
        fields.append("error=" + quote(t.error, safe=""))
    return "trial " + " ".join(fields)


def line_to_trial(line: str) -> Trial:
    head, _, rest = line.strip().partition(" ")
    if head != "trial":
        raise FormatError(f"not a trial record: {line[:40]!r}")
    kv = dict(item.split("=", 1) for item in rest.split(" ") if item)
    try:
        params = {k[6:]: _dec(v) for k, v in kv.items() if k.startswith("param.")}
        steps = {int(k[5:]): _dec(v) for k, v in kv.items() if k.startswith("step.")}
        t = Trial(int(kv["id"]), params, kv["state"], _dec(kv["objective"]), steps,
                  unquote(kv.get("error", "")))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"corrupt trial record: {exc}") from exc
    if t.state not in STATES:
        raise FormatError(f"unknown trial state {t.state!r}")
    return t


def append_journal(path, trial: Trial) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(trial_to_line(trial) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def write_journal_header(path, study: Study) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"study seed={study.seed} gamma={study.gamma!r} n_startup={study.n_startup} "
                 f"n_candidates={study.n_candidates} prune_warmup={study.prune_warmup}\n")
        fh.flush()
        os.fsync(fh.fileno())


def load_journal(path, space: SearchSpace) -> Study:
    """Rebuild a study from its journal; a partially written last line is ignored."""
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if not lines or not lines[0].startswith("study "):
        raise FormatError(f"{path}: missing study header")
    hdr = dict(item.split("=", 1) for item in lines[0].split(" ")[1:])
    study = Study(space, seed=int(hdr["seed"]), gamma=float(hdr["gamma"]),
                  n_startup=int(hdr["n_startup"]), n_candidates=int(hdr["n_candidates"]),
                  prune_warmup=int(hdr["prune_warmup"]))
    complete_lines = lines[1:-1]   # text after the final newline is an unfinished record
    for ln in complete_lines:
        if ln.strip():
            study.trials.append(line_to_trial(ln))
    for i, t in enumerate(study.trials):
        if t.id != i:
            raise FormatError(f"{path}: trial ids out of order at record {i}")
    return study


# ------------------------------------------------------------------ driver
def run_study(study: Study, objective: Callable[[Trial], float], n_trials: int,
              journal: Optional[Path] = None) -> Study:
    """Run trials until the study holds ``n_trials`` of them.

    ``objective(trial)`` returns the value to minimise; it may call
    ``trial.report`` / ``trial.should_prune`` and raise :class:`TrialPruned`.
    Any other exception marks the trial failed and the study moves on.
    With ``journal`` set, each finished trial is appended and fsync'd; if the
    journal already exists the study is expected to have been loaded from it.
    """
    if n_trials < 1:
        raise ConfigError("n_trials must be at least 1")
    if journal is not None:
        journal = Path(journal)
        if not journal.exists():
            write_journal_header(journal, study)
    while len(study.trials) < n_trials:
        trial = study.ask()
        try:
            value = objective(trial)
        except TrialPruned:
            study.tell(trial, state=PRUNED)
        except (KeyboardInterrupt, SystemExit):
            study.trials.pop()
            raise
        except Exception as exc:  # noqa: BLE001 - a failing trial must not end the study
            study.tell(trial, state=FAILED, error=f"{type(exc).__name__}: {exc}")
        else:
            study.tell(trial, value)
        if journal is not None:
            append_journal(journal, trial)
    return study


def training_objective(dataset, splits, space: SearchSpace, max_epochs: int, patience: int,
                       batch_size: int = 32, seed: int = 0) -> Callable[[Trial], float]:
    """Objective that trains the sampled AUWave and returns its best test-split loss."""
    from .models import AUWave
    from .train import TrainConfig, train

    def objective(trial: Trial) -> float:
        cfg, lr, gamma = space.to_configs(trial.params, len(dataset.stations))
        model = AUWave(cfg, seed=seed)
        tcfg = TrainConfig(lr=lr, gamma=gamma, max_epochs=max_epochs, patience=patience,
                           batch_size=batch_size, seed=seed)

        def on_epoch(epoch: int, loss: float) -> None:
            trial.report(epoch, loss)
            if trial.should_prune(epoch):
                raise TrialPruned()

        return train(model, dataset, splits, tcfg, on_epoch=on_epoch).best_val_loss

    return objective


# ------------------------------------------------------------------ reports
def history_csv(study: Study) -> str:
    lines = ["trial,state,objective,best_so_far"]
    for t, b in zip(study.trials, study.best_so_far()):
        obj = "" if t.objective is None else repr(t.objective)
        lines.append(f"{t.id},{t.state},{obj},{'' if b is None else repr(b)}")
    return "\n".join(lines) + "\n"


MIN_IMPORTANCE_TRIALS = 20


def importance(study: Study, n_bins: int = 10) -> dict:
    """Explained-variance share per parameter (a proxy, not fANOVA).

    For each parameter the objective is regressed on quantile bins of that
    parameter alone; the adjusted R^2 (clipped at zero, scaled by the
    fraction of trials where the parameter was active) is its raw score.
    Scores are normalised to sum to one, uniform when nothing explains the
    objective.
    """
    done = study.completed
    if len(done) < MIN_IMPORTANCE_TRIALS:
        raise InsufficientDataError(
            f"importance needs at least {MIN_IMPORTANCE_TRIALS} complete trials, have {len(done)}")
    names = study.space.names
    raw = {}
    for d in study.space.dims:
        rows = [(t.params[d.name], t.objective) for t in done if d.name in t.params]
        raw[d.name] = _binned_r2(d, rows, n_bins) * len(rows) / len(done)
    total = sum(raw.values())
    if total <= 0:
        return {n: 1.0 / len(names) for n in names}
    return {n: raw[n] / total for n in names}


def _binned_r2(d: Dim, rows: list, n_bins: int) -> float:
    if len(rows) < 3:
        return 0.0
    y = np.array([r[1] for r in rows], dtype=np.float64)
    if d.kind == "cat":
        x = np.array([d.choices.index(r[0]) for r in rows])
        labels = x
    else:
        x = np.array([d.to_internal(r[0]) for r in rows], dtype=np.float64)
        edges = np.unique(np.quantile(x, np.linspace(0, 1, n_bins + 1)[1:-1]))
        labels = np.searchsorted(edges, x, side="right")
    sst = float(((y - y.mean()) ** 2).sum())
    if sst <= 0:
        return 0.0
    uniq, inv = np.unique(labels, return_inverse=True)
    k = len(uniq)
    if k < 2 or len(y) <= k:
        return 0.0
    means = np.bincount(inv, weights=y) / np.bincount(inv)
    ssr = float(((y - means[inv]) ** 2).sum())
    r2 = 1.0 - ssr / sst
    adj = 1.0 - (1.0 - r2) * (len(y) - 1) / (len(y) - k)
    return max(adj, 0.0)


def importance_csv(scores: dict) -> str:
    lines = ["parameter,importance"]
    for k, v in sorted(scores.items(), key=lambda kv: (-kv[1], kv[0])):
        lines.append(f"{k},{v!r}")
    return "\n".join(lines) + "\n"
