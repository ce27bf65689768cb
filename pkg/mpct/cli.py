import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import config
from .controller import make_controller
from .errors import AbortedInfeasible, MPCTError
from .problem import validate
from .sim import Scenario, run_batch, run_closed_loop

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_INFEASIBLE = 2


@dataclass
class RunConfig:
    """ Everything one CLI invocation needs, after argument parsing. """
    command: str
    problem_file: str
    mode: Optional[str] = None
    count: Optional[int] = None
    seed: Optional[int] = None
    steps: Optional[int] = None
    state: Optional[list] = None
    out: str = 'results'
    formats: frozenset = field(default_factory=lambda: frozenset({'csv', 'json'}))
    timing: bool = True
    threads: int = config.THREADS
    cache_dir: Optional[str] = config.CACHE_DIR

    @classmethod
    def from_args(cls, args):
        formats = frozenset(f.strip() for f in args.format.split(',') if f.strip())
        unknown = formats - {'csv', 'json'}
        if unknown:
            raise MPCTError('unknown output format(s): {}'.format(', '.join(sorted(unknown))))
        if args.count is not None and args.count < 1:
            raise MPCTError('--count must be >= 1')
        if args.steps is not None and args.steps < 1:
            raise MPCTError('--steps must be >= 1')
        return cls(command=args.command, problem_file=args.problem, mode=args.mode, count=args.count,
                   seed=args.seed, steps=args.steps, state=args.state, out=args.out, formats=formats,
                   timing=not args.no_timing, threads=args.threads or config.THREADS,
                   cache_dir=args.cache or config.CACHE_DIR)


def _write_json(path, payload):
    with open(path, 'w') as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write('\n')


def _load(cfg: RunConfig):
    pf = config.load_problem(cfg.problem_file)
    diagnostics = validate(pf.problem)
    for d in diagnostics:
        print('invalid problem: {}'.format(d), file=sys.stderr)
    return pf, diagnostics


def _initial_state(cfg: RunConfig, pf):
    if cfg.state is not None:
        x = np.asarray(cfg.state, dtype=float)
        if x.shape != (pf.problem.nx,):
            raise MPCTError('--state needs {} values, got {}'.format(pf.problem.nx, x.shape[0]))
        return x
    if pf.scenario is not None and pf.scenario.x0 is not None:
        return np.asarray(pf.scenario.x0, dtype=float)
    return np.zeros(pf.problem.nx)


def cmd_solve(cfg: RunConfig):
    """ One solve from --state (or the scenario's x0, or the origin). """
    pf, diagnostics = _load(cfg)
    if diagnostics:
        return EXIT_INPUT
    mode = cfg.mode or pf.mode
    controller = make_controller(mode, pf.problem, pf.reference, cache_dir=cfg.cache_dir)
    report, _ = controller.solve(_initial_state(cfg, pf))
    payload = report.to_dict(timing=cfg.timing)
    payload['mode'] = mode
    if 'json' in cfg.formats:
        os.makedirs(cfg.out, exist_ok=True)
        _write_json(os.path.join(cfg.out, 'solve.json'), payload)
    print('{}: {} after {} iterations, u0 = {}'.format(
        mode, report.status.value, report.iterations, np.array2string(report.u0, precision=6)))
    return EXIT_OK if report.converged else EXIT_INFEASIBLE


def cmd_bench(cfg: RunConfig):
    """ Per-formulation iteration/time statistics over sampled initial states. """
    pf, diagnostics = _load(cfg)
    if diagnostics:
        return EXIT_INPUT
    scn = pf.scenario
    if scn is None or scn.x_box_lower is None:
        raise MPCTError('bench needs a scenario with x_box_lower / x_box_upper')
    count = cfg.count or scn.count
    seed = scn.seed if cfg.seed is None else cfg.seed
    states = scn.initial_states(count=count, seed=seed)
    modes = [cfg.mode] if cfg.mode else ['soft', 'hard', 'oracle']

    rows = []
    for mode in modes:
        print('Running {} cases in {} mode...'.format(count, mode))
        result = run_batch(scn, mode=mode, states=states, threads=cfg.threads, cache_dir=cfg.cache_dir)
        rows.append(result.stats(timing=cfg.timing))

    print('\nBenchmark results ({} cases, seed {}):'.format(count, seed))
    print('{:<8} {:>8} {:>8} {:>8} {:>8}   {:>10} {:>10}'.format(
        'mode', 'avg', 'median', 'max', 'min', 'avg ms', 'failures'))
    for row in rows:
        it, t = row['iterations'], row['time_s']
        print('{:<8} {:>8.1f} {:>8.1f} {:>8.0f} {:>8.0f}   {:>10.3f} {:>10d}'.format(
            row['mode'], it['avg'], it['median'], it['max'], it['min'], 1e3 * t['avg'], row['failures']))

    os.makedirs(cfg.out, exist_ok=True)
    if 'json' in cfg.formats:
        _write_json(os.path.join(cfg.out, 'bench.json'),
                    {'problem': os.path.basename(cfg.problem_file), 'count': count, 'seed': seed, 'rows': rows})
    if 'csv' in cfg.formats:
        table = [[r['mode']] + [r['iterations'][k] for k in ('avg', 'median', 'max', 'min')]
                 + [r['time_s'][k] for k in ('avg', 'median', 'max', 'min')] + [r['failures']] for r in rows]
        np.savetxt(os.path.join(cfg.out, 'bench.csv'), np.array(table, dtype=object).reshape(len(rows), 10),
                   fmt=['%s'] + ['%.6g'] * 8 + ['%d'], delimiter=',', comments='',
                   header='mode,it_avg,it_median,it_max,it_min,t_avg,t_median,t_max,t_min,failures')
    return EXIT_OK


def cmd_simulate(cfg: RunConfig):
    """ Closed-loop rollout; trace.csv and summary.json in --out. """
    pf, diagnostics = _load(cfg)
    if diagnostics:
        return EXIT_INPUT
    mode = cfg.mode or pf.mode
    base = pf.scenario
    scn = Scenario(pf.problem, pf.reference, x0=_initial_state(cfg, pf),
                   steps=cfg.steps or (base.steps if base is not None else 60),
                   seed=base.seed if base is not None else 0)
    os.makedirs(cfg.out, exist_ok=True)
    try:
        trace = run_closed_loop(scn, mode=mode, cache_dir=cfg.cache_dir)
        code, aborted = EXIT_OK, None
    except AbortedInfeasible as e:
        print('{} mode infeasible at step {}'.format(mode, e.step), file=sys.stderr)
        trace, code, aborted = e.trace, EXIT_INFEASIBLE, e.step

    if 'csv' in cfg.formats and trace.steps:
        trace.to_csv(os.path.join(cfg.out, 'trace.csv'), timing=cfg.timing)
    summary = trace.summary(timing=cfg.timing)
    summary.update({'mode': mode, 'aborted_at': aborted})
    if 'json' in cfg.formats:
        _write_json(os.path.join(cfg.out, 'summary.json'), summary)
    it = summary['iterations']
    print('\nClosed-loop results ({} mode):'.format(mode))
    print('Steps:       {}'.format(summary['steps']))
    print('Iterations:  avg {:.1f}, median {:.1f}, max {:.0f}, min {:.0f}'.format(
        it['avg'], it['median'], it['max'], it['min']))
    return code


def cmd_validate(cfg: RunConfig):
    """ Print every diagnostic of the problem file; exit 1 if there are any. """
    pf, diagnostics = _load(cfg)
    if not diagnostics:
        print('{}: OK (nx={}, nu={}, ny={}, N={})'.format(
            cfg.problem_file, pf.problem.nx, pf.problem.nu, pf.problem.ny, pf.problem.horizon))
        return EXIT_OK
    return EXIT_INPUT


COMMANDS = {'solve': cmd_solve, 'bench': cmd_bench, 'simulate': cmd_simulate, 'validate': cmd_validate}


def build_parser():
    parser = argparse.ArgumentParser(prog='mpct', description='Soft-constrained MPC for tracking with ADMM.')
    parser.add_argument('command', choices=sorted(COMMANDS), help='What to run')
    parser.add_argument('--problem', type=str, required=True,
                        help='Path to the problem JSON file: A, B, C, D (or plant.chain), Q, R, T, S, N '
                             '(horizon), rho, eps_p, eps_d, max_iter (max_iterations), bounds, beta, mode, '
                             'reference, scenario')
    parser.add_argument('--mode', type=str, default=None, choices=['soft', 'hard', 'oracle'],
                        help="Constraint encoding; bench runs all three when omitted")
    parser.add_argument('--count', type=int, default=None, help='Number of sampled initial states (bench)')
    parser.add_argument('--seed', type=int, default=None, help='Seed for the initial-state sampler')
    parser.add_argument('--steps', type=int, default=None, help='Closed-loop steps (simulate)')
    parser.add_argument('--state', type=float, nargs='+', default=None, help='Current state x(t)')
    parser.add_argument('--out', type=str, default='results', help='Output directory')
    parser.add_argument('--format', type=str, default='csv,json', help='Comma-separated output formats')
    parser.add_argument('--no-timing', action='store_true', help='Write zeros for all timings')
    parser.add_argument('--threads', type=int, default=None, help='Worker threads (default MPCT_THREADS)')
    parser.add_argument('--cache', type=str, default=None, help='Directory for factor cache dumps')
    parser.add_argument('--verbose', action='store_true', help='Log solver progress')
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else config.LOG_LEVEL,
                        format='%(asctime)s %(name)s %(levelname)s: %(message)s')
    try:
        cfg = RunConfig.from_args(args)
        return COMMANDS[cfg.command](cfg)
    except (OSError, MPCTError) as e:
        print('error: {}'.format(e), file=sys.stderr)
        return EXIT_INPUT
