# Last modified on Oct 18, 2026
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from mesa.time import BaseScheduler

from .errors import ConfigurationError


class BaseSchedulerByTypeFiltered(BaseScheduler):
    """
    A scheduler whose step method can be restricted to agents of one
    .agt_type, in the order the agents were added.

    Example:
    -------
    >>> scheduler = BaseSchedulerByTypeFiltered(model)
    >>> scheduler.step(agt_type="FlowStage")
    """

    def step(self, agt_type=None) -> None:
        """Execute the step of the (filtered) agents, one at a time."""
        self.do_each(method="step", agt_type=agt_type)
        self.steps += 1
        self.time += 1

    def do_each(self, method, agent_keys=None, shuffle=False, agt_type=None):
        if agent_keys is None:
            agent_keys = self.get_agent_keys()
        if agt_type is not None:
            agent_keys = [i for i in agent_keys if self._agents[i].agt_type == agt_type]
        if shuffle:
            self.model.random.shuffle(agent_keys)
        for agent_key in agent_keys:
            if agent_key in self._agents:
                getattr(self._agents[agent_key], method)()


def get_agt_attr(attr_str):
    """Build a reporter that reads a (nested) attribute from an agent.

    Stages expose different attributes, so the reporter returns None when the
    attribute chain is missing instead of raising.

    Parameters
    ----------
    attr_str : str
        A string of nested attributes separated by a period, e.g. "report.passed".

    Returns
    -------
    function
        A function of one agent returning the nested attribute or None.
    """

    def get_nested_attr(obj):
        def get_nested_attr_(obj, attr_str):
            attrs = attr_str.split(".", 1)
            current_attr = getattr(obj, attrs[0], None)
            if len(attrs) == 1 or current_attr is None:
                return current_attr
            return get_nested_attr_(current_attr, attrs[1])

        return get_nested_attr_(obj, attr_str)

    return get_nested_attr


def dict_to_string(dictionary, prefix="", indentor="  ", level=2):
    """Turn a (nested) dictionary into a printable string.

    Parameters
    ----------
    dictionary : dict
        A dictionary.
    prefix : str, optional
        Prefix of every line, by default "".
    indentor : str, optional
        Indentor, by default "  ".
    level : int, optional
        Deepest level printed as "key: value", by default 2.

    Returns
    -------
    str
        A printable string.
    """

    def to_lines(dictionary, count=1, lines=None):
        if lines is None:
            lines = []
        for key, value in dictionary.items():
            lines.append(prefix + indentor * count + str(key))
            if isinstance(value, dict) and count < level:
                lines = to_lines(value, count + 1, lines)
            elif not isinstance(value, dict) and count == level:
                lines[-1] += ":\t" + str(value)
            else:
                lines.append(prefix + indentor * (count + 1) + str(value))
        return lines

    return "\n".join(to_lines(dictionary))


class TimeRecorder:
    """A class for recording wall-clock time of pipeline stages."""

    def __init__(self):
        self.start = time.monotonic()
        self.records = {}

    def get_elapsed_time(self, event=None, strf=True):
        """Get elapsed time since the start of the recorder.

        Parameters
        ----------
        event : str, optional
            Record the elapsed time under this event name, by default None.
        strf : bool, optional
            Convert seconds to "%H:%M:%S", by default True.

        Returns
        -------
        float or str
            Elapsed time or its string format.
        """
        elapsed_time = time.monotonic() - self.start
        if strf:
            elapsed_time = self.sec2str(elapsed_time)
        if event is not None:
            self.records[event] = elapsed_time
        return elapsed_time

    @staticmethod
    def sec2str(secs, fmt="%H:%M:%S"):
        """Convert seconds to string format."""
        return time.strftime(fmt, time.gmtime(secs))


def random_generator(seed):
    """Return the counter-based generator every randomized field draws from."""
    return np.random.Generator(np.random.Philox(seed))


@dataclass
class CheckReport:
    """Outcome of one numerical check.

    Attributes
    ----------
    name : str
        Check name, e.g. "harnack_nonpositivity".
    passed : bool
        Verdict.
    worst_margin : float
        Smallest margin seen; negative values are violations.
    tolerance : float
        Allowed violation.
    anchor : str
        Result the check certifies, e.g. "Harnack inequality v <= 0".
    details : dict
        Extra scalars for the report (orders, constants, sizes).
    """

    name: str
    passed: bool
    worst_margin: float
    tolerance: float
    anchor: str = ""
    details: dict = field(default_factory=dict)

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"

    def to_dict(self) -> dict:
        out = asdict(self)
        out["passed"] = bool(self.passed)
        out["worst_margin"] = float(self.worst_margin)
        out["tolerance"] = float(self.tolerance)
        out["verdict"] = self.verdict
        out["details"] = {k: _to_builtin(v) for k, v in self.details.items()}
        return out


def _to_builtin(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, dict):
        return {k: _to_builtin(v) for k, v in value.items()}
    if isinstance(value, list | tuple):
        return [_to_builtin(v) for v in value]
    return value


class Indicator:
    """Convergence indicators for refinement studies.

    All methods are static. Errors are paired with the grid spacing of the
    level that produced them; orders are least-squares slopes in log-log
    space.
    """

    @staticmethod
    def remove_na(spacings, errors):
        """Drop levels where either the spacing or the error is nan.

        Parameters
        ----------
        spacings : array
            Grid spacing per level.
        errors : array
            Error measure per level.

        Returns
        -------
        tuple
            Updated (spacings, errors).
        """
        spacings = np.asarray(spacings, dtype=float)
        errors = np.asarray(errors, dtype=float)
        keep = ~(np.isnan(spacings) | np.isnan(errors))
        return spacings[keep], errors[keep]

    @staticmethod
    def get_order(spacings, errors, floor=1e-10):
        """Fit the observed order of convergence.

        Levels whose error is at or below ``floor`` carry no order
        information and are dropped. When fewer than two levels remain the
        errors are at roundoff and the order is reported as ``inf``.

        Parameters
        ----------
        spacings : array
            Grid spacing per level.
        errors : array
            Nonnegative error per level.
        floor : float, optional
            Roundoff floor, by default 1e-10.

        Returns
        -------
        float
            Fitted order.
        """
        spacings, errors = Indicator.remove_na(spacings, np.abs(errors))
        keep = errors > floor
        if keep.sum() < 2:
            return np.inf
        slope, _ = np.polyfit(np.log(spacings[keep]), np.log(errors[keep]), 1)
        return float(slope)

    @staticmethod
    def get_constants(spacings, errors, order=2.0):
        """Return error / spacing**order per level (stable when the order holds)."""
        spacings, errors = Indicator.remove_na(spacings, np.abs(errors))
        return errors / spacings**order

    @staticmethod
    def get_rel_err(reference, values, scale=None):
        """Max absolute deviation of ``values`` from ``reference`` over ``scale``.

        ``scale`` defaults to the largest magnitude of the reference.
        """
        reference = np.asarray(reference, dtype=float)
        values = np.asarray(values, dtype=float)
        if scale is None:
            scale = np.max(np.abs(reference))
        return float(np.max(np.abs(values - reference)) / max(scale, 1e-300))

    @staticmethod
    def extrapolate_to_zero(xs, values, lo, hi, degree=2):
        """Value at x = 0 of a least-squares polynomial fitted on lo <= x <= hi.

        Raises ConfigurationError when fewer than degree + 2 samples fall in
        the fit window.
        """
        xs = np.asarray(xs, dtype=float)
        values = np.asarray(values, dtype=float)
        mask = (xs >= lo) & (xs <= hi)
        if mask.sum() < degree + 2:
            raise ConfigurationError(
                f"Too few samples in [{lo:.3e}, {hi:.3e}] to extrapolate to zero."
            )
        coeffs = np.polynomial.polynomial.polyfit(xs[mask], values[mask], degree)
        return float(coeffs[0])

    @staticmethod
    def cal_indicator_df(spacings, errors_dict, floor=1e-10):
        """Tabulate errors, fitted orders and constants of several measures.

        Parameters
        ----------
        spacings : array
            Grid spacing per level.
        errors_dict : dict
            {measure name: errors per level}.
        floor : float, optional
            Roundoff floor passed to :meth:`get_order`.

        Returns
        -------
        DataFrame
            One row per measure with columns level_<k>, order, constant_spread.
        """
        rows = {}
        for name, errors in errors_dict.items():
            errors = np.abs(np.asarray(errors, dtype=float))
            row = {f"level_{k}": e for k, e in enumerate(errors)}
            row["order"] = Indicator.get_order(spacings, errors, floor)
            consts = Indicator.get_constants(spacings, errors)
            consts = consts[errors > floor]
            row["constant_spread"] = (
                float(consts.max() / consts.min()) if consts.size > 1 else 1.0
            )
            rows[name] = row
        return pd.DataFrame(rows).T
