"""Maximum-likelihood training and random architecture search.

All three model families (gmm, spn, gsptn) train the same way: Adam on the
mean negative log-likelihood with minibatches drawn without replacement and
reshuffled each epoch. Architecture search samples uniformly from fixed
per-family grids, trains every candidate, and ranks on a validation
criterion. Runs are bit-reproducible given their seeds.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor
from concurrent.futures import wait as futures_wait
from dataclasses import dataclass, asdict

import numpy as np

from . import affine, circuit as circuit_mod, metrics
from .errors import DimensionMismatchError, NonFiniteGradientError, TrainingDivergedError

SKIP_BUDGET = 10

GMM_COMPONENT_GRID = (2, 4, 8, 16, 32, 64, 128, 256, 512)
SPN_CHILD_GRID = (2, 4, 8, 16, 32, 64, 128)
SPN_PARTITION_GRID = (1, 2, 4, 8, 16, 32)
SPN_LAYER_GRID = (1, 2, 3, 4, 5)
GSPTN_LAYER_GRID = (1, 2, 3)
GSPTN_CHILD_GRID = (2, 4, 8, 16)
SHARING_MODES = ("none", "transform_only", "sum_and_transform")
PARAMETRIZATIONS = ("givens", "householder")
NONLINEARITIES = ("identity", "leaky_relu", "selu")

# initialization scales: near-identity rotations, unit diag, spread offsets
INIT_ANGLE_STD = 0.01
INIT_BIAS_STD = 1.0


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 100
    iterations: int = 10_000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def nll_loss(circuit: "circuit_mod.Circuit", batch: np.ndarray) -> float:
    """Mean negative log-likelihood of the batch."""
    return float(-circuit.logpdf(batch).mean())


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray,
              config: TrainConfig, layout=None) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update; mutates state, returns new params.

    `grads` is the gradient of the loss (descent direction is -grads). When a
    parameter layout is supplied, non-finite gradients raise an error naming
    the offending blocks and the invertibility floor is re-applied to every
    diagonal block after the step.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape:
        raise DimensionMismatchError(params.shape, grads.shape, "gradient")
    if not np.isfinite(grads).all():
        blocks = layout.nonfinite_blocks(grads) if layout is not None else ["gradient"]
        raise NonFiniteGradientError(blocks)
    state.t += 1
    state.m = config.beta1 * state.m + (1.0 - config.beta1) * grads
    state.v = config.beta2 * state.v + (1.0 - config.beta2) * grads * grads
    mhat = state.m / (1.0 - config.beta1 ** state.t)
    vhat = state.v / (1.0 - config.beta2 ** state.t)
    params = params - config.learning_rate * mhat / (np.sqrt(vhat) + config.eps)
    if layout is not None:
        for sl in layout.diag_slices():
            params[sl] = affine.project_diag(params[sl])
    return state, params


def train(circuit: "circuit_mod.Circuit", data: np.ndarray,
          config: TrainConfig | None = None) -> tuple["circuit_mod.Circuit", np.ndarray]:
    """Train in place for config.iterations minibatch steps; returns the
    circuit and the per-iteration loss trace.

    Batches are drawn without replacement and the order is reshuffled at each
    epoch boundary; datasets smaller than one batch fall back to full-batch
    steps. Batches whose loss or gradient is non-finite are recorded as NaN
    in the trace and skipped, up to a budget of 10, after which training
    aborts. Identical seeds give bit-identical traces and final parameters.
    """
    if config is None:
        config = TrainConfig()
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != circuit.dim:
        raise DimensionMismatchError((None, circuit.dim), data.shape, "training data")
    n = data.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    bs = min(config.batch_size, n)
    rng = np.random.default_rng(config.seed)
    layout = circuit.param_layout()
    params = circuit.get_params()
    state = AdamState.zeros(params.size)
    trace = np.empty(config.iterations)
    skips = 0

    order = rng.permutation(n)
    pos = 0
    for it in range(config.iterations):
        if pos + bs > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos : pos + bs]
        pos += bs
        batch = data[idx]
        values, g = circuit.grad(batch)
        loss = -values.mean()
        gflat = -g / bs
        if not (np.isfinite(loss) and np.isfinite(gflat).all()):
            trace[it] = np.nan
            skips += 1
            if skips > SKIP_BUDGET:
                raise TrainingDivergedError(
                    f"more than {SKIP_BUDGET} minibatches produced non-finite "
                    f"loss or gradients (last at iteration {it})")
            continue
        trace[it] = loss
        state, params = adam_step(state, params, gflat, config, layout)
        circuit.set_params(params)
    return circuit, trace


# ---------------------------------------------------------------------------
# architecture grids


@dataclass
class ArchSpec:
    """A point on one family's architecture grid.

    gmm uses n_components; spn uses sum_children, partitions, layers and
    permutation_seed; gsptn uses layers, sum_children, sharing,
    parametrization and nonlinearity.
    """

    family: str
    n_components: int | None = None
    sum_children: int | None = None
    partitions: int | None = None
    layers: int | None = None
    sharing: str | None = None
    parametrization: str = "givens"
    nonlinearity: str = "identity"
    permutation_seed: int | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(**d)


def _nl(tag: str) -> affine.Nonlinearity:
    if tag == "identity":
        return affine.Nonlinearity.identity()
    if tag == "leaky_relu":
        return affine.Nonlinearity.leaky_relu()
    if tag == "selu":
        return affine.Nonlinearity.selu()
    raise ValueError(f"unknown nonlinearity {tag!r}")


def _layer(dim, rng, kind, nl) -> affine.SvdAffine:
    return affine.random_layer(dim, rng, kind=kind, nonlinearity=nl,
                               angle_std=INIT_ANGLE_STD, bias_std=INIT_BIAS_STD)


def build_gmm(dim: int, n_components: int, rng: np.random.Generator,
              parametrization: str = "givens") -> "circuit_mod.Circuit":
    """Full-covariance Gaussian mixture: one sum over transformed leaves."""
    nl = affine.Nonlinearity.identity()
    b = circuit_mod.CircuitBuilder(dim)
    scope = tuple(range(dim))
    kids = [b.transform(b.leaf(scope), _layer(dim, rng, parametrization, nl))
            for _ in range(n_components)]
    return b.build(b.sum(kids))


def build_spn(dim: int, sum_children: int, partitions: int, layers: int,
              rng: np.random.Generator, permutation_seed: int,
              parametrization: str = "givens") -> "circuit_mod.Circuit":
    """Sum-product network over contiguous blocks of a permuted variable
    order, with full-covariance Gaussian leaves (affine over N(0, I)).

    Each level is a sum of products; every product splits its variables into
    min(partitions, #vars) contiguous blocks. Recursion stops at the last
    layer or when a block has a single variable.
    """
    nl = affine.Nonlinearity.identity()
    perm = np.random.default_rng(permutation_seed).permutation(dim)
    b = circuit_mod.CircuitBuilder(dim)

    def leaf_block(scope):
        return b.transform(b.leaf(scope), _layer(len(scope), rng, parametrization, nl))

    def level(scope, remaining: int) -> int:
        if remaining == 0 or len(scope) == 1:
            return leaf_block(scope)
        nparts = min(partitions, len(scope))
        kids = []
        for _ in range(sum_children):
            if nparts == 1:
                kids.append(level(scope, remaining - 1))
            else:
                blocks = np.array_split(np.arange(len(scope)), nparts)
                parts = [level(tuple(scope[j] for j in blk), remaining - 1)
                         for blk in blocks]
                kids.append(b.product(parts))
        return b.sum(kids)

    return b.build(level(tuple(int(v) for v in perm), layers))


def build_gsptn(dim: int, layers: int, sum_children: int, sharing: str,
                rng: np.random.Generator, parametrization: str = "givens",
                nonlinearity: str = "identity") -> "circuit_mod.Circuit":
    """Alternating sum/transform layers over a single standard-normal leaf.

    sharing wires the layers three ways:
      none: every branch gets fresh transform layers and fresh sums below;
      transform_only: each level owns sum_children transform layers, reused
        across all branches at that level, but every branch keeps its own
        sum nodes (own logits) and its own transform nodes;
      sum_and_transform: each level has a single sum node shared by all
        transforms of the level above, so each level exists exactly once.
    """
    if sharing not in SHARING_MODES:
        raise ValueError(f"unknown sharing mode {sharing!r}")
    nl = _nl(nonlinearity)
    b = circuit_mod.CircuitBuilder(dim)
    scope = tuple(range(dim))
    leaf = b.leaf(scope)

    if sharing == "sum_and_transform":
        below = leaf
        for _ in range(layers):
            kids = [b.transform(below, _layer(dim, rng, parametrization, nl))
                    for _ in range(sum_children)]
            below = b.sum(kids)
        return b.build(below)

    shared_layers = None
    if sharing == "transform_only":
        shared_layers = [[_layer(dim, rng, parametrization, nl)
                          for _ in range(sum_children)]
                         for _ in range(layers)]

    def level(k: int) -> int:
        if k == 0:
            return leaf
        kids = []
        for j in range(sum_children):
            layer = (shared_layers[k - 1][j] if shared_layers is not None
                     else _layer(dim, rng, parametrization, nl))
            kids.append(b.transform(level(k - 1), layer))
        return b.sum(kids)

    return b.build(level(layers))


def build_architecture(spec: ArchSpec, dim: int,
                       rng: np.random.Generator) -> "circuit_mod.Circuit":
    if spec.family == "gmm":
        return build_gmm(dim, spec.n_components, rng, spec.parametrization)
    if spec.family == "spn":
        return build_spn(dim, spec.sum_children, spec.partitions, spec.layers,
                         rng, spec.permutation_seed, spec.parametrization)
    if spec.family == "gsptn":
        return build_gsptn(dim, spec.layers, spec.sum_children, spec.sharing,
                           rng, spec.parametrization, spec.nonlinearity)
    raise ValueError(f"unknown family {spec.family!r}")


def sample_architecture(family: str, dim: int, rng: np.random.Generator,
                        overrides: dict | None = None
                        ) -> tuple[ArchSpec, "circuit_mod.Circuit"]:
    """Uniform draw from the family grid, then construct the circuit.

    SPN partition counts larger than the data dimension are resampled.
    `overrides` pins named ArchSpec fields instead of sampling them.
    """
    overrides = dict(overrides or {})

    def pick(name, grid):
        if overrides.get(name) is not None:
            return overrides[name]
        return grid[rng.integers(len(grid))]

    if family == "gmm":
        spec = ArchSpec(family="gmm",
                        n_components=int(pick("n_components", GMM_COMPONENT_GRID)),
                        parametrization=pick("parametrization", PARAMETRIZATIONS))
    elif family == "spn":
        while True:
            partitions = int(pick("partitions", SPN_PARTITION_GRID))
            if partitions <= dim:
                break
            if overrides.get("partitions") is not None:
                raise ValueError(f"partitions {partitions} exceeds dim {dim}")
        spec = ArchSpec(family="spn",
                        sum_children=int(pick("sum_children", SPN_CHILD_GRID)),
                        partitions=partitions,
                        layers=int(pick("layers", SPN_LAYER_GRID)),
                        parametrization=pick("parametrization", PARAMETRIZATIONS),
                        permutation_seed=int(rng.integers(2**32)))
    elif family == "gsptn":
        spec = ArchSpec(family="gsptn",
                        layers=int(pick("layers", GSPTN_LAYER_GRID)),
                        sum_children=int(pick("sum_children", GSPTN_CHILD_GRID)),
                        sharing=pick("sharing", SHARING_MODES),
                        parametrization=pick("parametrization", PARAMETRIZATIONS),
                        nonlinearity=pick("nonlinearity", NONLINEARITIES))
    else:
        raise ValueError(f"unknown family {family!r}")
    return spec, build_architecture(spec, dim, rng)


def count_parameters(circuit: "circuit_mod.Circuit") -> int:
    return circuit.num_parameters


# ---------------------------------------------------------------------------
# random search


@dataclass
class SearchResult:
    arch: ArchSpec
    circuit: "circuit_mod.Circuit"
    criterion: float
    valid_loglik: float
    valid_auc: float | None
    num_parameters: int
    train_seconds: float
    final_loss: float
    seed: int

    def summary(self) -> dict:
        out = {"arch": self.arch.to_dict(), "criterion": self.criterion,
               "valid_loglik": self.valid_loglik, "num_parameters": self.num_parameters,
               "train_seconds": round(self.train_seconds, 3),
               "final_loss": self.final_loss, "seed": self.seed}
        if self.valid_auc is not None:
            out["valid_auc"] = self.valid_auc
        return out


def _default_threads() -> int:
    env = os.environ.get("SPTN_THREADS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def random_search(family: str, train_x: np.ndarray, valid_x: np.ndarray,
                  valid_labels: np.ndarray | None = None,
                  max_architectures: int = 100,
                  wall_clock_seconds: float | None = None,
                  criterion: str = "valid_loglik",
                  config: TrainConfig | None = None,
                  seed: int = 0,
                  overrides: dict | None = None,
                  threads: int | None = None
                  ) -> tuple[SearchResult, list[SearchResult]]:
    """Train randomly sampled architectures and pick the validation winner.

    Returns (best, leaderboard) with the leaderboard sorted by descending
    criterion (ties keep sampling order). Architectures and their training
    seeds are all drawn up front from `seed`, so results do not depend on the
    thread count; a wall-clock budget stops the launch of new candidates and
    is inherently non-deterministic. Candidates that fail to train are
    dropped from the leaderboard; if none survive, the search errors.
    """
    if criterion not in ("valid_loglik", "valid_auc"):
        raise ValueError(f"unknown criterion {criterion!r}")
    if criterion == "valid_auc":
        if valid_labels is None:
            raise ValueError("valid_auc criterion needs validation labels")
        labels = np.asarray(valid_labels)
        if len(np.unique(labels)) < 2:
            raise ValueError("valid_auc criterion needs both classes present")
    if max_architectures < 1:
        raise ValueError("max_architectures must be >= 1")
    if config is None:
        config = TrainConfig()

    dim = train_x.shape[1]
    rng = np.random.default_rng(seed)
    jobs = []
    for i in range(max_architectures):
        spec, circ = sample_architecture(family, dim, rng, overrides)
        jobs.append((i, spec, circ, int(rng.integers(2**32))))

    deadline = None if wall_clock_seconds is None else time.monotonic() + wall_clock_seconds
    results: list[SearchResult | None] = [None] * len(jobs)
    errors: list[str] = []

    def run(job):
        i, spec, circ, train_seed = job
        cfg = TrainConfig(learning_rate=config.learning_rate,
                          batch_size=config.batch_size,
                          iterations=config.iterations,
                          seed=train_seed, beta1=config.beta1,
                          beta2=config.beta2, eps=config.eps)
        t0 = time.monotonic()
        try:
            _, trace = train(circ, train_x, cfg)
            vll = metrics.mean_loglik(circ.logpdf(valid_x))
            auc_val = None
            if valid_labels is not None:
                try:
                    auc_val = metrics.auc(-circ.logpdf(valid_x), valid_labels)
                except ValueError:
                    auc_val = None
            crit = vll if criterion == "valid_loglik" else auc_val
            if crit is None or not np.isfinite(crit):
                errors.append(f"arch {i}: criterion not finite")
                return
            finite = trace[np.isfinite(trace)]
            results[i] = SearchResult(
                arch=spec, circuit=circ, criterion=float(crit),
                valid_loglik=float(vll), valid_auc=auc_val,
                num_parameters=circ.num_parameters,
                train_seconds=time.monotonic() - t0,
                final_loss=float(finite[-1]) if finite.size else float("nan"),
                seed=train_seed)
        except Exception as exc:  # noqa: BLE001 - candidates may fail; search survives
            errors.append(f"arch {i} ({spec.to_dict()}): {type(exc).__name__}: {exc}")

    nthreads = threads if threads is not None else _default_threads()
    nthreads = max(1, min(nthreads, len(jobs)))
    if nthreads == 1:
        for job in jobs:
            if deadline is not None and time.monotonic() > deadline and any(
                    r is not None for r in results):
                break
            run(job)
    else:
        with ThreadPoolExecutor(max_workers=nthreads) as pool:
            pending: set = set()
            queue = list(reversed(jobs))
            launched = 0
            while queue or pending:
                while queue and len(pending) < nthreads:
                    if (deadline is not None and launched > 0
                            and time.monotonic() > deadline):
                        queue.clear()
                        break
                    pending.add(pool.submit(run, queue.pop()))
                    launched += 1
                if pending:
                    done, pending = futures_wait(pending, return_when=FIRST_COMPLETED)
                    for f in done:
                        f.result()

    board = [r for r in results if r is not None]
    if not board:
        detail = ("; ".join(errors[:3])) if errors else "no candidates ran"
        raise TrainingDivergedError(f"no architecture trained successfully: {detail}")
    board.sort(key=lambda r: -r.criterion)
    return board[0], board
