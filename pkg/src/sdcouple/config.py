"""Experiment configuration: a sectioned key-value file (INI syntax).

One file drives all three subcommands; unknown keys are rejected so typos
fail loudly.  Every output artefact carries the sha256 of the config text
for provenance.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .moves import MOVE_IDS, KernelConfig, MoveId, default_weights
from .sdmodel import SDParams
from .treespace import CladeConstraint


class ConfigError(ValueError):
    """Bad experiment configuration (user error)."""


@dataclass
class SimulationBlock:
    n_leaves: int
    root_age: float
    lam: float
    mu: float
    kappa: float = 0.0
    n_catastrophes: int = 0
    xi_mode: str = "one"  # "one", "beta", or a fixed numeric value as str
    xi_beta: tuple[float, float] = (1.0, 1.0 / 3.0)


@dataclass
class RunBlock:
    lags: tuple[int, ...] = (100,)
    n_pairs: int = 2
    max_iter: int = 100_000
    thin: int = 100
    master_seed: int = 1
    k_init: int | None = None
    threads: int = 1
    init_root_age: float | None = None
    n_chains: int = 4  # marginal-only mode
    marginal_iterations: int = 10_000


@dataclass
class ExperimentConfig:
    path: str
    text: str
    data_path: str | None
    simulation: SimulationBlock | None
    params: SDParams
    kernel: KernelConfig
    run: RunBlock
    constraint_specs: tuple[tuple[tuple[str, ...], float | None, float | None], ...]
    out_dir: str
    leaf_range_specs: tuple[tuple[str, float, float], ...] = ()
    mu_varying: bool = False
    kappa_varying: bool = False
    xi_varying: bool = False

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()[:16]

    def resolve_leaf_ranges(self, taxa) -> dict[int, tuple[float, float]]:
        order = {name: i + 1 for i, name in enumerate(taxa)}
        out = {}
        for name, lo, hi in self.leaf_range_specs:
            if name not in order:
                raise ConfigError(f"leaf_age_ranges names unknown taxon {name!r}")
            if hi < lo:
                raise ConfigError(f"leaf_age_ranges for {name!r} has hi < lo")
            out[order[name]] = (lo, hi)
        return out

    def resolve_constraints(self, taxa) -> tuple[CladeConstraint, ...]:
        order = {name: i for i, name in enumerate(taxa)}
        out = []
        for names, lo, hi in self.constraint_specs:
            mask = 0
            for n in names:
                if n not in order:
                    raise ConfigError(f"constraint names unknown taxon {n!r}")
                mask |= 1 << order[n]
            if mask == (1 << len(taxa)) - 1:
                raise ConfigError("a clade constraint must be a proper subset of the taxa")
            out.append(CladeConstraint(mask, lo, hi))
        return tuple(out)


def _floats(raw: str, n: int, where: str) -> tuple[float, ...]:
    parts = [p.strip() for p in raw.split(",")]
    if len(parts) != n:
        raise ConfigError(f"{where}: expected {n} comma-separated numbers, got {raw!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"{where}: not numeric: {raw!r}") from None


_MODEL_KEYS = {
    "mu", "mu_fixed", "mu_bounds", "kappa", "kappa_fixed", "kappa_bounds",
    "xi", "xi_fixed", "lambda_prior", "rho_prior", "root_age_bound", "leaf_age_ranges",
    "catastrophes",
}
_RUN_KEYS = {
    "lags", "n_pairs", "max_iter", "thin", "master_seed", "k_init", "threads",
    "init_root_age", "n_chains", "marginal_iterations",
}
_SIM_KEYS = {"n_leaves", "root_age", "lambda", "mu", "kappa", "n_catastrophes", "xi", "xi_beta"}
_KERNEL_EXTRA = {"theta"}


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text()
    ini = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        ini.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc

    def section(name):
        return ini[name] if ini.has_section(name) else {}

    for sec, allowed in (("model", _MODEL_KEYS), ("run", _RUN_KEYS), ("simulation", _SIM_KEYS)):
        for key in section(sec):
            if key not in allowed:
                raise ConfigError(f"{path} [{sec}]: unknown key {key!r}")

    # ---- data / simulation -----------------------------------------
    data_path = section("data").get("path")
    sim = None
    if ini.has_section("simulation"):
        s = section("simulation")
        try:
            sim = SimulationBlock(
                n_leaves=int(s.get("n_leaves", "8")),
                root_age=float(s.get("root_age", "1000")),
                lam=float(s.get("lambda", "0.1")),
                mu=float(s.get("mu", "2.5e-4")),
                kappa=float(s.get("kappa", "0")),
                n_catastrophes=int(s.get("n_catastrophes", "0")),
                xi_mode=s.get("xi", "one").strip(),
                xi_beta=_floats(s.get("xi_beta", "1, 0.3333333333333333"), 2, f"{path} [simulation] xi_beta"),
            )
        except ValueError as exc:
            raise ConfigError(f"{path} [simulation]: {exc}") from exc
        if sim.n_leaves < 2:
            raise ConfigError(f"{path} [simulation]: need at least 2 leaves")
    if data_path is None and sim is None:
        raise ConfigError(f"{path}: provide a [data] path or a [simulation] block")

    # ---- model -------------------------------------------------------
    m = section("model")
    mu_fixed = m.get("mu_fixed", "true").strip().lower() != "false"
    kappa_fixed = m.get("kappa_fixed", "true").strip().lower() != "false"
    xi_fixed = m.get("xi_fixed", "true").strip().lower() != "false"
    cats_raw = m.get("catastrophes", "").strip().lower()
    try:
        params = SDParams(
            mu=float(m.get("mu", str(sim.mu if sim else 1e-3))),
            kappa=float(m.get("kappa", str(sim.kappa if sim else 0.0))),
            xi=None,
            lambda_prior=_floats(m.get("lambda_prior", "1.0, 0.001"), 2, f"{path} [model] lambda_prior"),
            rho_prior=_floats(m.get("rho_prior", "1.5, 5000"), 2, f"{path} [model] rho_prior"),
            root_age_bound=float(m.get("root_age_bound", "inf")),
            mu_bounds=_floats(m.get("mu_bounds", "1e-12, 1e3"), 2, f"{path} [model] mu_bounds"),
            kappa_bounds=_floats(m.get("kappa_bounds", "0.0, 0.999"), 2, f"{path} [model] kappa_bounds"),
            mu_fixed=mu_fixed,
            kappa_fixed=kappa_fixed,
            xi_fixed=xi_fixed,
            catastrophes=None if not cats_raw else cats_raw == "true",
        )
    except ValueError as exc:
        raise ConfigError(f"{path} [model]: {exc}") from exc

    # ---- leaf age ranges ----------------------------------------------
    leaf_ranges = []
    raw_ranges = m.get("leaf_age_ranges", "").strip()
    if raw_ranges:
        for entry in raw_ranges.split(";"):
            parts = entry.split()
            if len(parts) != 3:
                raise ConfigError(f"{path} [model] leaf_age_ranges: expected 'name lo hi', got {entry!r}")
            try:
                leaf_ranges.append((parts[0], float(parts[1]), float(parts[2])))
            except ValueError:
                raise ConfigError(f"{path} [model] leaf_age_ranges: bad bounds in {entry!r}") from None

    # ---- constraints --------------------------------------------------
    specs = []
    for key, raw in section("constraints").items():
        head, _, bounds = raw.partition(":")
        names = tuple(head.split())
        if not names:
            raise ConfigError(f"{path} [constraints] {key}: no taxa listed")
        lo = hi = None
        if bounds.strip():
            lo_s, _, hi_s = bounds.partition(",")
            lo = float(lo_s) if lo_s.strip() else None
            hi = float(hi_s) if hi_s.strip() else None
        specs.append((names, lo, hi))

    # ---- kernel --------------------------------------------------------
    k = section("kernel")
    theta = float(k.get("theta", "0.01"))
    explicit = {key: float(val) for key, val in k.items() if key not in _KERNEL_EXTRA}
    unknown = [key for key in explicit if key not in MOVE_IDS]
    if unknown:
        raise ConfigError(f"{path} [kernel]: unknown move name(s) {unknown}")
    if explicit:
        weights = {MOVE_IDS[key]: val for key, val in explicit.items()}
    else:
        weights = default_weights(
            cats=params.catastrophes,
            mu_varying=not mu_fixed,
            kappa_varying=not kappa_fixed,
            xi_varying=not xi_fixed,
            leaf_ranges=bool(m.get("leaf_age_ranges")),
        )
    try:
        kernel = KernelConfig(weights=weights, theta=theta)
    except ValueError as exc:
        raise ConfigError(f"{path} [kernel]: {exc}") from exc
    cat_moves = {MoveId.CAT_ADD, MoveId.CAT_DELETE, MoveId.CAT_MOVE, MoveId.CAT_RESAMPLE}
    if not params.catastrophes and cat_moves & kernel.weights.keys():
        raise ConfigError(f"{path} [kernel]: catastrophe moves enabled but the model has none")

    # ---- run -----------------------------------------------------------
    r = section("run")
    try:
        lags = tuple(int(v) for v in r.get("lags", "100").split(","))
        run = RunBlock(
            lags=lags,
            n_pairs=int(r.get("n_pairs", "2")),
            max_iter=int(r.get("max_iter", "100000")),
            thin=int(r.get("thin", "100")),
            master_seed=int(r.get("master_seed", "1")),
            k_init=int(r["k_init"]) if r.get("k_init", "").strip() else None,
            threads=int(r.get("threads", "1")),
            init_root_age=float(r["init_root_age"]) if r.get("init_root_age", "").strip() else None,
            n_chains=int(r.get("n_chains", "4")),
            marginal_iterations=int(r.get("marginal_iterations", "10000")),
        )
    except ValueError as exc:
        raise ConfigError(f"{path} [run]: {exc}") from exc
    if any(b <= a for a, b in zip(run.lags, run.lags[1:])):
        raise ConfigError(f"{path} [run]: lags must be strictly increasing")
    if any(l < 1 for l in run.lags):
        raise ConfigError(f"{path} [run]: lags must be >= 1")
    if run.thin < 1 or run.n_pairs < 1 or run.max_iter < 1:
        raise ConfigError(f"{path} [run]: thin, n_pairs and max_iter must be positive")

    out_dir = section("output").get("dir", "out") if ini.has_section("output") else "out"

    return ExperimentConfig(
        path=str(path),
        text=text,
        data_path=data_path,
        simulation=sim,
        params=params,
        kernel=kernel,
        run=run,
        constraint_specs=tuple(specs),
        out_dir=out_dir,
        leaf_range_specs=tuple(leaf_ranges),
        mu_varying=not mu_fixed,
        kappa_varying=not kappa_fixed,
        xi_varying=not xi_fixed,
    )
