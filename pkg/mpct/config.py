"""
Process settings from the environment and problem files in JSON.

Problem file layout::

    {
      "horizon": 15,
      "plant": {"A": [[...]], "B": [[...]], "C": [[...]], "D": [[...]]}
            or {"chain": {"masses": [1, 1, 1], "spring_constant": 2,
                          "actuated": [0, 2], "Ts": 0.2}},
      "weights": {"Q": [...], "R": [...], "T": [...], "S": [...]},
      "bounds": {"x": {"lower": [...], "upper": [...]}, "u": {...}, "y": {...},
                 "xs": {...}, "us": {...}, "ys": {...}},
      "mode": "soft",
      "beta": 10,
      "rho": 1.2, "eps_p": 1e-4, "eps_d": 1e-4, "max_iterations": 5000,
      "reference": {"x_r": [...], "u_r": [...]},
      "scenario": {"x_box_lower": [...], "x_box_upper": [...], "x0": [...],
                   "steps": 60, "seed": 0, "count": 1000}
    }

Weights are matrices or, as 1-D lists, diagonals. A bound vector is either one
row (same limits at every stage) or N+1 rows (the last one for the artificial
reference); null means unbounded. The "xs", "us", "ys" entries override the
artificial-reference row. "beta" may be omitted only when "mode" is "hard".

The flat spellings A, B, C, D, Q, R, T, S, N and max_iter are accepted in
place of "plant", "weights", "horizon" and "max_iterations".
"""
import json
import logging
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import MPCTError, ProblemFileError
from .problem import BoundKind, PlantModel, ProblemData, ReferencePair, StageBounds, Weights
from .sim import MassSpringChain, Scenario, build_chain_model

log = logging.getLogger(__name__)


def _env_int(name, default):
    try:
        return int(os.environ.get(name, default))
    except ValueError:
        log.warning('ignoring non-integer %s=%r', name, os.environ.get(name))
        return default


# Configuration
THREADS = max(1, _env_int('MPCT_THREADS', os.cpu_count() or 1))
LOG_LEVEL = os.environ.get('MPCT_LOG_LEVEL', 'WARNING').upper()
CACHE_DIR = os.environ.get('MPCT_CACHE_DIR') or None


@dataclass(frozen=True, eq=False)
class ProblemFile:
    problem: ProblemData
    reference: ReferencePair
    scenario: Optional[Scenario]
    mode: str = 'soft'


def _require(doc, key, where=''):
    if not isinstance(doc, dict) or key not in doc:
        raise ProblemFileError(where + key, 'missing')
    return doc[key]


def _section(doc, key, where='', default=None):
    """ doc[key] when it is a JSON object, `default` when absent. """
    value = doc.get(key, default)
    if value is not default and not isinstance(value, dict):
        raise ProblemFileError(where + key, 'expected an object, got {}'.format(type(value).__name__))
    return value


def _matrix(value, field, diagonal=False):
    try:
        M = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ProblemFileError(field, 'not a numeric matrix') from None
    if np.any(np.isnan(M)):
        raise ProblemFileError(field, 'null entries are not allowed')
    if M.ndim == 1:
        return np.diag(M) if diagonal else M.reshape(1, -1)
    if M.ndim != 2:
        raise ProblemFileError(field, 'expected a matrix or a diagonal')
    return M


def _vector(value, field, dim=None):
    try:
        v = np.atleast_1d(np.array(value, dtype=float))
    except (TypeError, ValueError):
        raise ProblemFileError(field, 'not a numeric vector') from None
    if v.ndim != 1 or np.any(np.isnan(v)):
        raise ProblemFileError(field, 'expected a vector of numbers')
    if dim is not None and v.shape != (dim,):
        raise ProblemFileError(field, 'expected {} entries, got {}'.format(dim, v.shape[0]))
    return v


def _bound_rows(value, field, dim, rows, fill):
    """ (rows x dim) array from one row or `rows` rows; null -> fill (+-inf). """
    if not isinstance(value, (list, int, float)) or isinstance(value, bool):
        raise ProblemFileError(field, 'expected a list of numbers')
    try:
        arr = np.array([[np.nan if e is None else e for e in np.atleast_1d(r)]
                        for r in (value if value and isinstance(value[0], list) else [value])], dtype=float)
    except (TypeError, ValueError, KeyError, IndexError):
        raise ProblemFileError(field, 'not a numeric vector') from None
    if arr.ndim != 2 or arr.shape[1] != dim or arr.shape[0] not in (1, rows):
        raise ProblemFileError(field, 'expected {} entries per row and 1 or {} rows'.format(dim, rows))
    arr = np.broadcast_to(arr, (rows, dim)).copy()
    arr[np.isnan(arr)] = fill
    return arr


def _plant(doc):
    plant = _require(doc, 'plant')
    if not isinstance(plant, dict):
        raise ProblemFileError('plant', 'expected an object')
    if 'chain' in plant:
        chain = _section(plant, 'chain', 'plant.')
        try:
            spec = MassSpringChain(tuple(float(m) for m in _require(chain, 'masses', 'plant.chain.')),
                                   float(_require(chain, 'spring_constant', 'plant.chain.')),
                                   tuple(int(i) for i in chain.get('actuated', (0, -1))))
            return build_chain_model(spec, float(_require(chain, 'Ts', 'plant.chain.')))
        except ProblemFileError:
            raise
        except (MPCTError, TypeError, ValueError) as e:
            raise ProblemFileError('plant.chain', str(e)) from None
    try:
        return PlantModel(*(_matrix(_require(plant, k, 'plant.'), 'plant.' + k) for k in 'ABCD'))
    except ProblemFileError:
        raise
    except MPCTError as e:
        raise ProblemFileError('plant', str(e)) from None


def _bounds(doc, horizon, model, mode, beta):
    spec = _section(doc, 'bounds', default={})
    rows = horizon + 1
    lower, upper = [], []
    for key, dim in (('x', model.nx), ('u', model.nu), ('y', model.ny)):
        entry = _section(spec, key, 'bounds.', default={})
        lo = _bound_rows(entry.get('lower', [None] * dim), 'bounds.{}.lower'.format(key), dim, rows, -np.inf)
        hi = _bound_rows(entry.get('upper', [None] * dim), 'bounds.{}.upper'.format(key), dim, rows, np.inf)
        if key + 's' in spec:
            override = _section(spec, key + 's', 'bounds.')
            lo[-1] = _bound_rows(override.get('lower', [None] * dim), 'bounds.{}s.lower'.format(key), dim, 1,
                                 -np.inf)[0]
            hi[-1] = _bound_rows(override.get('upper', [None] * dim), 'bounds.{}s.upper'.format(key), dim, 1,
                                 np.inf)[0]
        lower.append(lo)
        upper.append(hi)
    lower, upper = np.hstack(lower), np.hstack(upper)
    try:
        weight = np.asarray(beta, dtype=float)
    except (TypeError, ValueError):
        raise ProblemFileError('beta', 'expected a number or a list of numbers') from None
    if weight.size not in (1, lower.size):
        raise ProblemFileError('beta', 'expected a scalar or {} entries'.format(lower.size))
    if np.any(~np.isfinite(weight)) or np.any(weight < 0):
        raise ProblemFileError('beta', 'weights must be finite and >= 0')
    kind = BoundKind.SOFT if mode == 'soft' else BoundKind.HARD
    return StageBounds(lower, upper, int(kind), weight.reshape(lower.shape) if weight.size > 1 else float(weight))


def _scenario(doc, problem, reference, nx):
    spec = _section(doc, 'scenario')
    if spec is None:
        return None
    box_lo = spec.get('x_box_lower')
    box_hi = spec.get('x_box_upper')
    x0 = spec.get('x0')
    try:
        return Scenario(problem, reference,
                        x_box_lower=None if box_lo is None else _vector(box_lo, 'scenario.x_box_lower', nx),
                        x_box_upper=None if box_hi is None else _vector(box_hi, 'scenario.x_box_upper', nx),
                        x0=None if x0 is None else _vector(x0, 'scenario.x0', nx),
                        steps=int(spec.get('steps', 60)), seed=int(spec.get('seed', 0)),
                        count=int(spec.get('count', 1)))
    except ProblemFileError:
        raise
    except (MPCTError, TypeError, ValueError) as e:
        raise ProblemFileError('scenario', str(e)) from None


# Flat spellings accepted next to the nested layout above.
ALIASES = {'N': 'horizon', 'max_iter': 'max_iterations'}


def _normalise(doc):
    """
    Copy of `doc` with the flat spellings (N, max_iter, top-level A..D and
    Q, R, T, S) folded into the nested layout.
    """
    doc = dict(doc)
    for alias, key in ALIASES.items():
        if alias in doc:
            if key in doc:
                raise ProblemFileError(alias, 'given together with "{}"'.format(key))
            doc[key] = doc.pop(alias)
    for section, names in (('plant', 'ABCD'), ('weights', 'QRTS')):
        flat = [k for k in names if k in doc]
        if flat:
            if section in doc:
                raise ProblemFileError(flat[0], 'given together with "{}"'.format(section))
            doc[section] = {k: doc.pop(k) for k in flat}
    return doc


def parse_problem(doc) -> ProblemFile:
    """ ProblemFile from an already decoded JSON document. """
    if not isinstance(doc, dict):
        raise ProblemFileError('<root>', 'expected a JSON object')
    doc = _normalise(doc)
    horizon = _require(doc, 'horizon')
    if not isinstance(horizon, int) or horizon < 1:
        raise ProblemFileError('horizon', 'expected a positive integer, got {!r}'.format(horizon))
    model = _plant(doc)
    w = _require(doc, 'weights')
    if not isinstance(w, dict):
        raise ProblemFileError('weights', 'expected an object')
    weights = Weights(*(_matrix(_require(w, k, 'weights.'), 'weights.' + k, diagonal=True) for k in 'QRTS'))
    mode = doc.get('mode', 'soft')
    if mode not in ('soft', 'hard'):
        raise ProblemFileError('mode', "expected 'soft' or 'hard', got {!r}".format(mode))
    beta = doc.get('beta')
    if beta is None:
        if mode == 'soft':
            raise ProblemFileError('beta', 'required in soft mode')
        # a hard problem only needs weights if it is later switched to soft
        beta = 0.0
    bounds = _bounds(doc, horizon, model, mode, beta)
    try:
        problem = ProblemData(model, weights, horizon, bounds, rho=float(doc.get('rho', 1.2)),
                              eps_p=float(doc.get('eps_p', 1e-4)), eps_d=float(doc.get('eps_d', 1e-4)),
                              max_iterations=int(doc.get('max_iterations', 5000)))
    except (TypeError, ValueError) as e:
        raise ProblemFileError('solver', str(e)) from None
    ref = _section(doc, 'reference', default={})
    reference = ReferencePair(_vector(ref.get('x_r', [0.0] * model.nx), 'reference.x_r', model.nx),
                              _vector(ref.get('u_r', [0.0] * model.nu), 'reference.u_r', model.nu))
    return ProblemFile(problem, reference, _scenario(doc, problem, reference, model.nx), mode)


def load_problem(path) -> ProblemFile:
    """
    Read a problem file.

    Raises
    ------
    FileNotFoundError
        `path` does not exist
    ProblemFileError
        the document is not valid JSON or a field is malformed; `field`
        names the culprit
    """
    if not os.path.isfile(path):
        raise FileNotFoundError('Problem file not found at {}'.format(path))
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ProblemFileError('<json>', 'line {} column {}: {}'.format(e.lineno, e.colno, e.msg)) from None
    pf = parse_problem(doc)
    log.info('loaded %s: nx=%d nu=%d ny=%d N=%d (%s)', path, pf.problem.nx, pf.problem.nu, pf.problem.ny,
             pf.problem.horizon, pf.mode)
    return pf
