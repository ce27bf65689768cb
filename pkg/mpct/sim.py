"""
Plant simulation and experiments: the mass-spring chain, scenario sampling,
closed-loop rollouts and batches of independent solves.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.linalg import expm

from .admm import SolveStatus
from .controller import make_controller
from .errors import AbortedInfeasible, InvalidBounds, InvalidParameter, MPCTError
from .problem import (BoundMode, PlantModel, ProblemData, ReferencePair, StageBounds, Weights,
                      with_constraint_mode)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MassSpringChain:
    """
    Masses in a row joined by springs, the outer two also tied to fixed walls.
    Forces act on the masses listed in `actuated` (default: first and last).
    """
    masses: tuple
    spring_constant: float
    actuated: tuple = (0, -1)

    def __post_init__(self):
        if len(self.masses) < 2:
            raise InvalidParameter('masses', 'a chain needs at least 2 masses')
        if any(not m > 0 for m in self.masses):
            raise InvalidParameter('masses', 'masses must be positive')
        if not self.spring_constant >= 0:
            raise InvalidParameter('spring_constant', 'spring constant must be >= 0')

    def continuous(self):
        """ (Ac, Bc) of x = (positions, velocities), u = actuator forces. """
        n = len(self.masses)
        k = self.spring_constant
        stiffness = k * (2 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1))
        inv_mass = np.diag(1.0 / np.asarray(self.masses, dtype=float))
        Ac = np.block([[np.zeros((n, n)), np.eye(n)], [-inv_mass @ stiffness, np.zeros((n, n))]])
        Bc = np.zeros((2 * n, len(self.actuated)))
        for j, i in enumerate(self.actuated):
            Bc[n + (i % n), j] = 1.0 / self.masses[i]
        return Ac, Bc

    def relative_distances(self):
        """ C rows p_{i+1} - p_i for neighbouring masses. """
        n = len(self.masses)
        C = np.zeros((n - 1, 2 * n))
        for i in range(n - 1):
            C[i, i], C[i, i + 1] = -1.0, 1.0
        return C


def build_chain_model(chain: MassSpringChain, Ts, C=None, D=None) -> PlantModel:
    """
    Zero-order-hold discretization of the chain, exact through the matrix
    exponential of [[Ac, Bc], [0, 0]] Ts. Outputs default to the relative
    distances between neighbouring masses with D = 0.
    """
    if not Ts > 0:
        raise InvalidParameter('Ts', 'sample time must be positive')
    Ac, Bc = chain.continuous()
    nx, nu = Bc.shape
    aug = np.zeros((nx + nu, nx + nu))
    aug[:nx, :nx], aug[:nx, nx:] = Ac, Bc
    Phi = expm(aug * Ts)
    C = chain.relative_distances() if C is None else np.atleast_2d(C)
    D = np.zeros((C.shape[0], nu)) if D is None else np.atleast_2d(D)
    return PlantModel(Phi[:nx, :nx], Phi[:nx, nx:], C, D)


def step_plant(model: PlantModel, x, u):
    """ (A x + B u, C x + D u). """
    return model.A @ x + model.B @ u, model.C @ x + model.D @ u


def sample_initial_states(lower, upper, count, seed=0) -> List[np.ndarray]:
    """ `count` states drawn uniformly from the box, reproducible for a given seed. """
    lower, upper = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
    if lower.shape != upper.shape or np.any(lower > upper):
        raise InvalidBounds('x_box')
    rng = np.random.default_rng(seed)
    return list(rng.uniform(lower, upper, size=(count, lower.shape[0])))


def iteration_stats(values):
    """ Avg./Median/Max./Min. of a sequence of numbers. """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return {'avg': float('nan'), 'median': float('nan'), 'max': float('nan'), 'min': float('nan')}
    return {'avg': float(np.mean(values)), 'median': float(np.median(values)),
            'max': float(np.max(values)), 'min': float(np.min(values))}


@dataclass(frozen=True, eq=False)
class Scenario:
    """
    An experiment on one problem: either a fixed initial state or `count`
    states sampled from [x_box_lower, x_box_upper] with `seed`.
    """
    problem: ProblemData
    reference: ReferencePair
    x_box_lower: Optional[np.ndarray] = None
    x_box_upper: Optional[np.ndarray] = None
    x0: Optional[np.ndarray] = None
    steps: int = 60
    seed: int = 0
    count: int = 1

    def __post_init__(self):
        if (self.x_box_lower is None) != (self.x_box_upper is None):
            raise InvalidBounds('x_box', 'x_box needs both lower and upper')
        if self.x_box_lower is not None and np.any(np.asarray(self.x_box_lower) > np.asarray(self.x_box_upper)):
            raise InvalidBounds('x_box', 'x_box lower > upper')

    def initial_states(self, count=None, seed=None):
        count = self.count if count is None else count
        seed = self.seed if seed is None else seed
        if self.x_box_lower is None:
            if self.x0 is None:
                raise InvalidParameter('x0', 'scenario has neither x0 nor an initial-state box')
            return [np.asarray(self.x0, dtype=float)] * count
        return sample_initial_states(self.x_box_lower, self.x_box_upper, count, seed)


@dataclass
class RolloutTrace:
    """ One row per closed-loop step; x[t] is the state the step started from. """
    x: list = field(default_factory=list)
    u: list = field(default_factory=list)
    y: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    statuses: list = field(default_factory=list)
    times: list = field(default_factory=list)
    final_state: Optional[np.ndarray] = None

    def record(self, x, u, y, report):
        self.x.append(np.array(x, dtype=float))
        self.u.append(np.array(u, dtype=float))
        self.y.append(np.array(y, dtype=float))
        self.iterations.append(int(report.iterations))
        self.statuses.append(report.status.value)
        self.times.append(float(report.solve_time))

    @property
    def steps(self):
        return len(self.x)

    def to_csv(self, path, timing=True):
        nx, nu, ny = len(self.x[0]), len(self.u[0]), len(self.y[0])
        header = ['t'] + ['x{}'.format(i + 1) for i in range(nx)] + ['u{}'.format(i + 1) for i in range(nu)] \
            + ['y{}'.format(i + 1) for i in range(ny)] + ['iters', 'status', 'time_s']
        rows = [[t] + [float(v) for v in np.concatenate([self.x[t], self.u[t], self.y[t]])]
                + [self.iterations[t], self.statuses[t], self.times[t] if timing else 0.0]
                for t in range(self.steps)]
        fmt = ['%d'] + ['%.12g'] * (nx + nu + ny) + ['%d', '%s', '%.6f']
        np.savetxt(path, np.array(rows, dtype=object).reshape(len(rows), len(header)), fmt=fmt,
                   delimiter=',', header=','.join(header), comments='')

    def summary(self, timing=True):
        times = [t if timing else 0.0 for t in self.times]
        return {
            'steps': self.steps,
            'converged': sum(s == SolveStatus.CONVERGED.value for s in self.statuses),
            'iterations': iteration_stats(self.iterations),
            'time_s': iteration_stats(times[1:] if len(times) > 1 else times),
            'first_solve_time_s': times[0] if times else 0.0,
            'final_state': [float(v) for v in self.final_state] if self.final_state is not None else None,
        }


def run_closed_loop(scn: Scenario, mode='soft', controller=None, cache=None, cache_dir=None) -> RolloutTrace:
    """
    Receding-horizon rollout from scn.x0 for scn.steps steps. Each solve is
    warm-started from the previous (v, lambda) moved one stage forward; u0 is
    applied to the plant.

    Raises
    ------
    AbortedInfeasible
        mode is 'hard' and a solve hits the iteration cap; the trace so far
        is attached to the exception
    """
    if scn.x0 is None:
        raise InvalidParameter('x0', 'closed-loop runs need a fixed initial state')
    controller = controller or make_controller(mode, scn.problem, scn.reference, cache=cache, cache_dir=cache_dir)
    model = scn.problem.model
    width = scn.problem.nx + scn.problem.nu + scn.problem.ny
    trace = RolloutTrace()
    x = np.asarray(scn.x0, dtype=float)
    warm = None
    for t in range(scn.steps):
        report, warm = controller.solve(x, warm)
        if mode == 'hard' and not report.converged:
            trace.final_state = x
            raise AbortedInfeasible(t, trace)
        x_next, y = step_plant(model, x, report.u0)
        trace.record(x, report.u0, y, report)
        x = x_next
        if warm is not None:
            warm = warm.shifted(width)
        if t % 10 == 0:
            log.info('step %d: %d iterations (%s)', t, report.iterations, report.status.value)
    trace.final_state = x
    return trace


@dataclass
class BatchResult:
    mode: str
    reports: list
    failures: int = 0

    def stats(self, timing=True):
        done = [r for r in self.reports if r is not None]
        times = [r.solve_time if timing else 0.0 for r in done]
        return {
            'mode': self.mode,
            'count': len(self.reports),
            'failures': self.failures,
            'not_converged': sum(not r.converged for r in done),
            'iterations': iteration_stats([r.iterations for r in done]),
            # the first solve pays for cold caches and is reported on its own
            'time_s': iteration_stats(times[1:] if len(times) > 1 else times),
            'first_solve_time_s': times[0] if times else 0.0,
        }


def run_batch(scn: Scenario, mode='soft', states=None, threads=1, cache=None, cache_dir=None) -> BatchResult:
    """
    One cold-started solve per initial state. Cases run on up to `threads`
    workers sharing one factorization; reports keep the order of `states`.
    """
    states = scn.initial_states() if states is None else states
    controller = make_controller(mode, scn.problem, scn.reference, cache=cache, cache_dir=cache_dir)

    def run(x):
        try:
            report, _ = controller.solve(x)
            return report
        except MPCTError as e:
            log.warning('case failed: %s', e)
            return None

    if not states:
        return BatchResult(mode, [])
    # first case alone so its cold-start cost does not overlap the others
    reports = [run(states[0])]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        reports.extend(pool.map(run, states[1:]))
    failures = sum(r is None for r in reports)
    log.info('%s batch: %d cases, %d failures', mode, len(reports), failures)
    return BatchResult(mode, reports, failures)


def oscillating_masses(output_limit=None, mode='soft', beta=10.0, horizon=15, rho=1.2, eps=1e-4,
                       count=1000, seed=0, steps=60) -> Scenario:
    """
    Three 1 kg masses, k = 2 N/m, forces on the outer masses, Ts = 0.2 s,
    outputs the two relative distances. Tracks x_r = (0.4, 0.4, 0.4, 0, 0, 0),
    u_r = (0.8, 0.8) under |p| <= 0.6, |v| <= 1, 0 <= u <= 1 and, when
    `output_limit` is given, |y| <= output_limit.
    """
    model = build_chain_model(MassSpringChain((1.0, 1.0, 1.0), 2.0), 0.2)
    weights = Weights(Q=np.diag([2.5, 2.5, 2.5, 0.5, 0.5, 0.5]), R=np.diag([0.3, 0.3]),
                      T=np.diag([200.0, 200.0, 200.0, 10.0, 10.0, 10.0]), S=np.eye(2))
    x_bar = np.array([0.6, 0.6, 0.6, 1.0, 1.0, 1.0])
    y = (None, None) if output_limit is None else (-np.full(2, output_limit), np.full(2, output_limit))
    bounds = StageBounds.constant(horizon, 6, 2, 2, x=(-x_bar, x_bar), u=(np.zeros(2), np.ones(2)), y=y,
                                  mode=BoundMode.soft(beta))
    problem = with_constraint_mode(ProblemData(model, weights, horizon, bounds, rho=rho, eps_p=eps, eps_d=eps),
                                   mode)
    reference = ReferencePair([0.4, 0.4, 0.4, 0.0, 0.0, 0.0], [0.8, 0.8])
    box = np.array([0.1, 0.1, 0.1, 0.2, 0.2, 0.2])
    return Scenario(problem, reference, x_box_lower=-box, x_box_upper=box,
                    x0=np.array([0.0, 0.0, 0.0, -0.5, 0.0, 0.0]), steps=steps, seed=seed, count=count)
