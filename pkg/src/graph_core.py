"""Sparse factor graph and Levenberg-Marquardt optimizer over mixed variables."""
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from src.geometry import RigidTransform, se3_exp, se3_log, se3_right_jacobian_inverse
from src.utils.errors import InvalidInitialValue, NeverOptimized, NoFreeVariables, SingularSystem

logger = logging.getLogger(__name__)


class VariableKind(Enum):
    POSE = "pose"
    TRANSFORM = "transform"
    BIAS = "bias"
    SCALE = "scale"
    STATION_POSITION = "station_position"


DOF = {
    VariableKind.POSE: 6,
    VariableKind.TRANSFORM: 6,
    VariableKind.BIAS: 1,
    VariableKind.SCALE: 1,
    VariableKind.STATION_POSITION: 3,
}

SE3_KINDS = (VariableKind.POSE, VariableKind.TRANSFORM)


def validate_value(kind: VariableKind, value: Any) -> Any:
    """Return value normalized for its kind or raise InvalidInitialValue."""
    if kind in SE3_KINDS:
        if not isinstance(value, RigidTransform):
            raise InvalidInitialValue(f"{kind.value} needs a RigidTransform, got {type(value).__name__}")
        return value
    if kind == VariableKind.STATION_POSITION:
        arr = np.asarray(value, dtype=float)
        if arr.size != 3 or not np.all(np.isfinite(arr)):
            raise InvalidInitialValue(f"Station position must be a finite 3-vector, got {value}")
        return arr.reshape(3).copy()
    try:
        scalar = float(value)
    except (TypeError, ValueError):
        raise InvalidInitialValue(f"{kind.value} needs a scalar, got {value!r}")
    if not np.isfinite(scalar):
        raise InvalidInitialValue(f"{kind.value} must be finite, got {scalar}")
    if kind == VariableKind.SCALE and scalar <= 0.0:
        raise InvalidInitialValue(f"Scale must be positive, got {scalar}")
    return scalar


def retract(kind: VariableKind, value: Any, delta: np.ndarray) -> Any:
    delta = np.asarray(delta, dtype=float).reshape(DOF[kind])
    if kind in SE3_KINDS:
        return value.compose(se3_exp(delta))
    if kind == VariableKind.SCALE:
        return float(value * np.exp(delta[0]))
    if kind == VariableKind.BIAS:
        return float(value + delta[0])
    return value + delta


def local_difference(kind: VariableKind, value: Any, mean: Any) -> np.ndarray:
    """value minus mean in the tangent space at mean."""
    if kind in SE3_KINDS:
        return se3_log(mean.inverse().compose(value)).vector
    if kind == VariableKind.SCALE:
        return np.array([np.log(value) - np.log(mean)])
    if kind == VariableKind.BIAS:
        return np.array([value - mean])
    return np.asarray(value, dtype=float) - np.asarray(mean, dtype=float)


def local_difference_jacobian(kind: VariableKind, value: Any, mean: Any) -> np.ndarray:
    if kind in SE3_KINDS:
        return se3_right_jacobian_inverse(local_difference(kind, value, mean))
    return np.eye(DOF[kind])


@dataclass
class VariableNode:
    id: int
    kind: VariableKind
    value: Any
    fixed: bool = False
    prior_information: Optional[np.ndarray] = None
    prior_mean: Any = None
    name: str = ""
    marginal_updated: bool = False

    def __post_init__(self):
        if self.prior_information is None:
            self.prior_information = np.zeros((self.dof, self.dof))
        if self.prior_mean is None:
            self.prior_mean = self.value

    @property
    def dof(self) -> int:
        return DOF[self.kind]

    @property
    def has_prior(self) -> bool:
        return bool(np.any(self.prior_information))


@dataclass(frozen=True)
class HuberKernel:
    """Huber loss on the squared whitened residual."""
    delta: float

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError(f"Huber delta must be positive, got {self.delta}")


def _kernel_delta(kernel: Optional[HuberKernel]) -> float:
    return np.inf if kernel is None else kernel.delta


def robust_cost(squared: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    squared = np.asarray(squared, dtype=float)
    inlier = squared <= deltas ** 2
    with np.errstate(invalid="ignore"):
        outer = 2.0 * deltas * np.sqrt(squared) - deltas ** 2
    return np.where(inlier, squared, outer)


def robust_weight(squared: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    squared = np.asarray(squared, dtype=float)
    inlier = squared <= deltas ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        outer = deltas / np.sqrt(squared)
    return np.where(inlier, 1.0, outer)


class FactorEdge:
    """Base factor: residual over an ordered list of variables.

    Subclasses implement ``evaluate`` and ``linearize`` for a single factor and may
    override the ``*_batch`` classmethods with vectorized versions.
    """

    variable_kinds: Tuple[VariableKind, ...] = ()

    def __init__(self, variable_ids: Sequence[int], information: np.ndarray,
                 kernel: Optional[HuberKernel] = None):
        info = np.atleast_2d(np.asarray(information, dtype=float))
        if info.shape[0] != info.shape[1]:
            raise ValueError(f"Information matrix must be square, got {info.shape}")
        if not np.allclose(info, info.T, rtol=1e-9, atol=1e-12):
            raise ValueError("Information matrix must be symmetric")
        try:
            np.linalg.cholesky(info)
        except np.linalg.LinAlgError:
            raise ValueError("Information matrix must be positive-definite")
        if len(variable_ids) != len(self.variable_kinds):
            raise ValueError(f"{type(self).__name__} connects {len(self.variable_kinds)} variables, got {len(variable_ids)}")
        self.id: Optional[int] = None
        self.variable_ids = tuple(int(v) for v in variable_ids)
        self.information = info
        self.kernel = kernel

    @property
    def residual_dim(self) -> int:
        return self.information.shape[0]

    @property
    def group_key(self) -> Tuple:
        return (type(self), self.variable_kinds)

    def evaluate(self, values: Sequence[Any]) -> np.ndarray:
        raise NotImplementedError

    def linearize(self, values: Sequence[Any]) -> Tuple[np.ndarray, List[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def evaluate_batch(cls, factors: Sequence["FactorEdge"], graph: "FactorGraph") -> np.ndarray:
        return np.array([f.evaluate([graph.value(v) for v in f.variable_ids]) for f in factors])

    @classmethod
    def linearize_batch(cls, factors: Sequence["FactorEdge"],
                        graph: "FactorGraph") -> Tuple[np.ndarray, List[np.ndarray]]:
        residuals = []
        blocks: List[List[np.ndarray]] = [[] for _ in factors[0].variable_ids]
        for f in factors:
            r, jacobians = f.linearize([graph.value(v) for v in f.variable_ids])
            residuals.append(r)
            for slot, j in enumerate(jacobians):
                blocks[slot].append(j)
        return np.array(residuals), [np.array(b) for b in blocks]


class PriorFactor(FactorEdge):
    """Gaussian prior on one variable: residual = value minus mean."""

    def __init__(self, variable_id: int, kind: VariableKind, mean: Any, information: np.ndarray,
                 kernel: Optional[HuberKernel] = None):
        self.variable_kinds = (kind,)
        super().__init__([variable_id], information, kernel)
        if self.residual_dim != DOF[kind]:
            raise ValueError(f"Prior on {kind.value} needs a {DOF[kind]}x{DOF[kind]} information matrix")
        self.kind = kind
        self.mean = validate_value(kind, mean)

    def evaluate(self, values: Sequence[Any]) -> np.ndarray:
        return local_difference(self.kind, values[0], self.mean)

    def linearize(self, values: Sequence[Any]) -> Tuple[np.ndarray, List[np.ndarray]]:
        r = local_difference(self.kind, values[0], self.mean)
        return r, [local_difference_jacobian(self.kind, values[0], self.mean)]


@dataclass
class OptimizerSettings:
    max_iterations: int = 100
    gradient_tolerance: float = 1e-8
    step_tolerance: float = 1e-10
    function_tolerance: float = 1e-10
    initial_damping: float = 1e-4
    damping_floor: float = 1e-12
    damping_ceiling: float = 1e8
    dense_threshold: int = 200


@dataclass
class OptimizeReport:
    iterations: int
    initial_cost: float
    final_cost: float
    reason: str
    marginal_updated: Dict[int, bool] = field(default_factory=dict)
    rank_deficient: Optional[bool] = None


class FactorGraph:
    """Variables, factors and their adjacency. Single writer."""

    def __init__(self):
        self.logger = logging.getLogger(__name__)
        self.variables: Dict[int, VariableNode] = {}
        self.factors: Dict[int, FactorEdge] = {}
        self._adjacency: Dict[int, set] = defaultdict(set)
        self._next_variable = 0
        self._next_factor = 0
        self.optimized = False

    def add_variable(self, kind: VariableKind, value: Any, fixed: bool = False, name: str = "",
                     prior_information: Optional[np.ndarray] = None) -> int:
        value = validate_value(kind, value)
        vid = self._next_variable
        self._next_variable += 1
        node = VariableNode(vid, kind, value, fixed=fixed, name=name)
        self.variables[vid] = node
        if prior_information is not None:
            node.prior_information = self._check_prior(node, prior_information)
        return vid

    def _check_prior(self, node: VariableNode, information: np.ndarray) -> np.ndarray:
        info = np.atleast_2d(np.asarray(information, dtype=float))
        if info.shape != (node.dof, node.dof):
            raise ValueError(f"Prior for {node.kind.value} must be {node.dof}x{node.dof}")
        if not np.allclose(info, info.T, atol=1e-12):
            raise ValueError("Prior information must be symmetric")
        return 0.5 * (info + info.T)

    def set_prior(self, vid: int, information: np.ndarray, mean: Any = None):
        node = self.variables[vid]
        node.prior_information = self._check_prior(node, information)
        node.prior_mean = node.value if mean is None else validate_value(node.kind, mean)

    def add_factor(self, factor: FactorEdge) -> int:
        for slot, vid in enumerate(factor.variable_ids):
            node = self.variables.get(vid)
            if node is None:
                raise KeyError(f"Unknown variable id {vid}")
            if node.kind != factor.variable_kinds[slot]:
                raise ValueError(f"Slot {slot} of {type(factor).__name__} expects {factor.variable_kinds[slot].value}, "
                                 f"got {node.kind.value}")
        fid = self._next_factor
        self._next_factor += 1
        factor.id = fid
        self.factors[fid] = factor
        for vid in factor.variable_ids:
            self._adjacency[vid].add(fid)
        return fid

    def remove_factor(self, fid: int):
        factor = self.factors.pop(fid)
        for vid in factor.variable_ids:
            self._adjacency[vid].discard(fid)

    def variable(self, vid: int) -> VariableNode:
        return self.variables[vid]

    def value(self, vid: int) -> Any:
        return self.variables[vid].value

    def set_value(self, vid: int, value: Any):
        node = self.variables[vid]
        node.value = validate_value(node.kind, value)

    def set_fixed(self, vid: int, fixed: bool):
        self.variables[vid].fixed = fixed

    def factors_touching(self, variable_ids: Iterable[int]) -> List[FactorEdge]:
        fids = set()
        for vid in variable_ids:
            fids |= self._adjacency.get(vid, set())
        return [self.factors[f] for f in sorted(fids)]

    def factors_of_type(self, factor_type: type) -> List[FactorEdge]:
        return [f for f in self.factors.values() if isinstance(f, factor_type)]

    def normalized_residuals(self, factors: Sequence[FactorEdge]) -> np.ndarray:
        """sqrt(r' W r) per factor."""
        out = np.zeros(len(factors))
        for indices, group in _group(factors):
            residuals = type(group[0]).evaluate_batch(group, self).reshape(len(group), -1)
            info = np.stack([f.information for f in group])
            out[indices] = np.sqrt(np.einsum("ni,nij,nj->n", residuals, info, residuals))
        return out


def add_variable(graph: FactorGraph, kind: VariableKind, value: Any, fixed: bool = False) -> int:
    return graph.add_variable(kind, value, fixed)


def _group(factors: Sequence[FactorEdge]) -> List[Tuple[np.ndarray, List[FactorEdge]]]:
    groups: Dict[Tuple, List[int]] = defaultdict(list)
    for i, f in enumerate(factors):
        groups[f.group_key].append(i)
    return [(np.array(idx), [factors[i] for i in idx]) for idx in groups.values()]


class _Problem:
    """Active variables of one optimize call and their offsets in the state vector."""

    def __init__(self, graph: FactorGraph, factors: List[FactorEdge], variable_ids: List[int]):
        self.graph = graph
        self.factors = factors
        self.variable_ids = variable_ids
        self.offsets: Dict[int, int] = {}
        size = 0
        for vid in variable_ids:
            self.offsets[vid] = size
            size += graph.variables[vid].dof
        self.size = size
        self.groups = _group(factors)
        self._information = [np.stack([f.information for f in group]) for _, group in self.groups]
        self._deltas = [np.array([_kernel_delta(f.kernel) for f in group]) for _, group in self.groups]

    def cost(self) -> float:
        total = 0.0
        for (_, group), info, deltas in zip(self.groups, self._information, self._deltas):
            residuals = type(group[0]).evaluate_batch(group, self.graph).reshape(len(group), -1)
            squared = np.einsum("ni,nij,nj->n", residuals, info, residuals)
            total += float(np.sum(robust_cost(squared, deltas)))
        return total

    def linearize(self) -> Tuple[Any, np.ndarray]:
        gradient = np.zeros(self.size)
        rows: List[np.ndarray] = []
        cols: List[np.ndarray] = []
        vals: List[np.ndarray] = []
        for (_, group), info, deltas in zip(self.groups, self._information, self._deltas):
            residuals, jacobians = type(group[0]).linearize_batch(group, self.graph)
            n = len(group)
            residuals = residuals.reshape(n, -1)
            m = residuals.shape[1]
            jacobians = [j.reshape(n, m, -1) for j in jacobians]
            squared = np.einsum("ni,nij,nj->n", residuals, info, residuals)
            weighted = info * robust_weight(squared, deltas)[:, None, None]
            wr = np.einsum("nij,nj->ni", weighted, residuals)

            offsets = [np.array([self.offsets.get(f.variable_ids[slot], -1) for f in group])
                       for slot in range(len(jacobians))]
            for a, ja in enumerate(jacobians):
                da = ja.shape[2]
                active_a = offsets[a] >= 0
                if not np.any(active_a):
                    continue
                g = np.einsum("nmd,nm->nd", ja, wr)
                idx = offsets[a][active_a, None] + np.arange(da)
                np.add.at(gradient, idx, g[active_a])
                wja = np.einsum("nij,njd->nid", weighted, ja)
                for b, jb in enumerate(jacobians):
                    db = jb.shape[2]
                    active = active_a & (offsets[b] >= 0)
                    if not np.any(active):
                        continue
                    block = np.einsum("nmi,nmj->nij", jb[active], wja[active])
                    r_idx = offsets[b][active, None, None] + np.arange(db)[None, :, None]
                    c_idx = offsets[a][active, None, None] + np.arange(da)[None, None, :]
                    rows.append(np.broadcast_to(r_idx, block.shape).ravel())
                    cols.append(np.broadcast_to(c_idx, block.shape).ravel())
                    vals.append(block.ravel())

        if rows:
            hessian = scipy.sparse.coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(self.size, self.size)).tocsc()
        else:
            hessian = scipy.sparse.csc_matrix((self.size, self.size))
        return hessian, gradient

    def apply(self, step: np.ndarray) -> Dict[int, Any]:
        saved = {}
        for vid in self.variable_ids:
            node = self.graph.variables[vid]
            offset = self.offsets[vid]
            saved[vid] = node.value
            node.value = retract(node.kind, node.value, step[offset:offset + node.dof])
        return saved

    def restore(self, saved: Dict[int, Any]):
        for vid, value in saved.items():
            self.graph.variables[vid].value = value

    def state_norm(self) -> float:
        total = 0.0
        for vid in self.variable_ids:
            node = self.graph.variables[vid]
            if node.kind in SE3_KINDS:
                total += float(np.sum(node.value.translation ** 2)) + node.value.angle ** 2
            elif node.kind == VariableKind.SCALE:
                total += float(np.log(node.value) ** 2)
            else:
                total += float(np.sum(np.asarray(node.value) ** 2))
        return float(np.sqrt(total))


def _solve(hessian, gradient: np.ndarray, damping: float, dense: bool) -> Optional[np.ndarray]:
    diagonal = hessian.diagonal()
    floor = 1e-12 * max(float(diagonal.max(initial=0.0)), 1.0)
    scaling = np.maximum(diagonal, floor)
    try:
        if dense:
            system = hessian.toarray() + np.diag(damping * scaling)
            factor = scipy.linalg.cho_factor(system)
            step = scipy.linalg.cho_solve(factor, -gradient)
        else:
            system = (hessian + scipy.sparse.diags(damping * scaling)).tocsc()
            step = scipy.sparse.linalg.splu(system, permc_spec="MMD_AT_PLUS_A").solve(-gradient)
    except (np.linalg.LinAlgError, RuntimeError, ValueError):
        return None
    if not np.all(np.isfinite(step)):
        return None
    return step


def _rank_deficient(hessian) -> bool:
    eigenvalues = np.linalg.eigvalsh(hessian.toarray())
    top = float(eigenvalues.max(initial=0.0))
    return top <= 0.0 or float(eigenvalues.min()) <= 1e-9 * top


def _active_problem(graph: FactorGraph, factors: Optional[Iterable[FactorEdge]],
                    include_priors: bool) -> Optional[_Problem]:
    factor_list = list(graph.factors.values()) if factors is None else list(factors)
    if not factor_list:
        return None
    touched = []
    seen = set()
    for f in factor_list:
        for vid in f.variable_ids:
            if vid not in seen:
                seen.add(vid)
                touched.append(vid)
    free = [vid for vid in touched if not graph.variables[vid].fixed]
    if not free:
        raise NoFreeVariables("Every variable touched by the active factors is fixed")
    if include_priors:
        for vid in free:
            node = graph.variables[vid]
            if node.has_prior:
                prior = _MarginalPrior(node)
                factor_list.append(prior)
    return _Problem(graph, factor_list, free)


class _MarginalPrior(PriorFactor):
    """Prior built from a variable's stored information."""

    def __init__(self, node: VariableNode):
        information = node.prior_information + 1e-12 * np.eye(node.dof)
        super().__init__(node.id, node.kind, node.prior_mean, information)


def optimize(graph: FactorGraph, settings: Optional[OptimizerSettings] = None,
             factors: Optional[Iterable[FactorEdge]] = None, include_priors: bool = True) -> OptimizeReport:
    """Levenberg-Marquardt over the free variables touched by ``factors``.

    ``factors`` defaults to every factor in the graph. Variables with a stored prior
    (see update_marginal_information) get an implicit prior factor unless
    ``include_priors`` is False.
    """
    settings = settings or OptimizerSettings()
    problem = _active_problem(graph, factors, include_priors)
    if problem is None:
        graph.optimized = True
        return OptimizeReport(0, 0.0, 0.0, "gradient")

    dense = len(problem.variable_ids) < settings.dense_threshold
    marginal_flags = {vid: graph.variables[vid].has_prior and include_priors for vid in problem.variable_ids}
    cost = problem.cost()
    initial_cost = cost
    damping = settings.initial_damping
    hessian, gradient = problem.linearize()
    iterations = 0
    reason = "max-iter"

    while iterations < settings.max_iterations:
        if float(np.max(np.abs(gradient), initial=0.0)) <= settings.gradient_tolerance:
            reason = "gradient"
            break
        iterations += 1
        step = _solve(hessian, gradient, damping, dense)
        if step is None:
            damping *= 10.0
            if damping > settings.damping_ceiling:
                raise SingularSystem(f"Normal equations singular at damping {damping:.1e}")
            continue

        x_norm = problem.state_norm()
        saved = problem.apply(step)
        new_cost = problem.cost()
        if np.isfinite(new_cost) and new_cost < cost:
            logger.debug(f"LM iteration {iterations}: cost {cost:.6e} -> {new_cost:.6e}, damping {damping:.1e}")
            small_step = np.linalg.norm(step) <= settings.step_tolerance * (x_norm + settings.step_tolerance)
            stalled = cost - new_cost <= settings.function_tolerance * cost
            cost = new_cost
            damping = max(damping / 10.0, settings.damping_floor)
            hessian, gradient = problem.linearize()
            if small_step or stalled:
                reason = "step"
                break
        else:
            problem.restore(saved)
            damping *= 10.0
            # rejected with a change below tolerance: at the minimum to working precision
            flat = np.isfinite(new_cost) and new_cost - cost <= settings.function_tolerance * cost
            if flat or damping > settings.damping_ceiling:
                reason = "step"
                break

    rank_deficient = _rank_deficient(hessian) if problem.size <= 60 else None
    graph.optimized = True
    logger.debug(f"Optimized {len(problem.variable_ids)} variables over {len(problem.factors)} factors: "
                 f"{initial_cost:.6e} -> {cost:.6e} in {iterations} iterations ({reason})")
    return OptimizeReport(iterations, initial_cost, cost, reason, marginal_flags, rank_deficient)


def _nearest_psd(matrix: np.ndarray) -> np.ndarray:
    sym = 0.5 * (matrix + matrix.T)
    eigenvalues, eigenvectors = np.linalg.eigh(sym)
    clipped = (eigenvectors * np.clip(eigenvalues, 0.0, None)) @ eigenvectors.T
    return 0.5 * (clipped + clipped.T)


def update_marginal_information(graph: FactorGraph, variable_ids: Iterable[int]):
    """Replace each variable's prior with its Gauss-Newton marginal at the current values.

    The Hessian is built from the graph's explicit factors only, so repeated calls
    without new factors are idempotent.
    """
    if not graph.optimized:
        raise NeverOptimized("update_marginal_information needs a prior optimize() call")
    targets = [vid for vid in variable_ids if graph.factors_touching([vid])]
    if not targets:
        return

    factor_list = list(graph.factors.values())
    active = []
    seen = set()
    for f in factor_list:
        for vid in f.variable_ids:
            node = graph.variables[vid]
            if vid not in seen and (not node.fixed or vid in targets):
                seen.add(vid)
                active.append(vid)
    problem = _Problem(graph, factor_list, active)
    hessian, _ = problem.linearize()
    hessian = hessian.tocsc()

    for vid in targets:
        node = graph.variables[vid]
        start = problem.offsets[vid]
        a = np.arange(start, start + node.dof)
        b = np.setdiff1d(np.arange(problem.size), a)
        h_aa = hessian[a][:, a].toarray()
        if len(b):
            h_ab = hessian[a][:, b].toarray()
            h_bb = hessian[b][:, b].tocsc()
            ridge = 1e-12 * max(float(h_bb.diagonal().max(initial=0.0)), 1.0)
            h_bb = (h_bb + scipy.sparse.identity(len(b)) * ridge).tocsc()
            try:
                solved = scipy.sparse.linalg.splu(h_bb, permc_spec="MMD_AT_PLUS_A").solve(h_ab.T.copy())
            except RuntimeError:
                solved = np.linalg.lstsq(h_bb.toarray(), h_ab.T, rcond=None)[0]
            marginal = h_aa - h_ab @ solved
        else:
            marginal = h_aa
        node.prior_information = _nearest_psd(marginal)
        node.prior_mean = node.value
        node.marginal_updated = True
        logger.debug(f"Marginal information of {node.name or vid}: trace {np.trace(node.prior_information):.3e}")


def numeric_jacobian_check(factor: FactorEdge, values: Sequence[Any], epsilon: float = 1e-6) -> float:
    """Max |analytic - central difference| over every Jacobian entry."""
    if not 1e-10 < epsilon < 1e-3:
        raise ValueError(f"epsilon must lie in (1e-10, 1e-3), got {epsilon}")
    values = list(values)
    _, analytic = factor.linearize(values)
    deviation = 0.0
    for slot, kind in enumerate(factor.variable_kinds):
        dof = DOF[kind]
        numeric = np.zeros((factor.residual_dim, dof))
        for k in range(dof):
            delta = np.zeros(dof)
            delta[k] = epsilon
            plus = list(values)
            minus = list(values)
            plus[slot] = retract(kind, values[slot], delta)
            minus[slot] = retract(kind, values[slot], -delta)
            numeric[:, k] = (np.atleast_1d(factor.evaluate(plus)) - np.atleast_1d(factor.evaluate(minus))) / (2 * epsilon)
        jac = np.asarray(analytic[slot], dtype=float).reshape(factor.residual_dim, dof)
        deviation = max(deviation, float(np.max(np.abs(jac - numeric))))
    return deviation
