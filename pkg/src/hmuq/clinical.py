"""Clinical measurements over landmarks and Monte-Carlo class propagation.

Measurements are arithmetic expressions over named landmark coordinates:

    expr   := term (('+' | '-') term)*
    term   := unary ('/' unary)*
    unary  := '-' unary | atom
    atom   := NUMBER | FUNC '(' name (',' name)* ')' | '(' expr ')'
    FUNC   := angle | distance | linedist

`angle(a, b, c)` is the angle at vertex b in degrees, `distance(a, b)` the
Euclidean distance, and `linedist(p, a, b)` the perpendicular distance from p
to the line through a and b.  Classification intervals are right-inclusive:
value v gets label i when breakpoint_{i-1} < v <= breakpoint_i, with values at
or below the first breakpoint mapping to the first label.
"""

from __future__ import annotations

import csv
import math
import os
import re
from bisect import bisect_left
from dataclasses import dataclass, field

import numpy as np

from .gauss import InvalidParameterError

DEFAULT_MEASUREMENTS_PATH = os.path.join(os.path.dirname(__file__), "data",
                                         "cephalometric.cfg")
FUNC_ARITY = {"angle": 3, "distance": 2, "linedist": 3}
MAX_REDRAWS = 20


class ExpressionError(ValueError):
    """A measurement expression does not parse."""


class DegenerateGeometryError(ValueError):
    """A geometric primitive was evaluated on coincident points."""


# --- expression parsing ----------------------------------------------------------

_TOKEN = re.compile(r"\s*(?:(\d+(?:\.\d*)?(?:[eE][+-]?\d+)?)|([A-Za-z_]\w*)|([-+/(),]))")


def _tokenize(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            if text[pos:].strip():
                raise ExpressionError(f"unexpected character {text[pos:].strip()[0]!r} "
                                      f"in expression {text!r}")
            break
        number, ident, symbol = m.groups()
        if number is not None:
            tokens.append(("num", float(number)))
        elif ident is not None:
            tokens.append(("name", ident))
        else:
            tokens.append((symbol, symbol))
        pos = m.end()
    tokens.append(("end", None))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos][0]

    def take(self, kind=None):
        tok = self.tokens[self.pos]
        if kind is not None and tok[0] != kind:
            raise ExpressionError(f"expected {kind!r}, got {tok[1]!r} "
                                  f"in expression {self.text!r}")
        self.pos += 1
        return tok

    def expr(self):
        node = self.term()
        while self.peek() in "+-":
            op = self.take()[0]
            node = ("add" if op == "+" else "sub", node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek() == "/":
            self.take()
            node = ("div", node, self.unary())
        return node

    def unary(self):
        if self.peek() == "-":
            self.take()
            return ("neg", self.unary())
        return self.atom()

    def atom(self):
        kind = self.peek()
        if kind == "num":
            return ("num", self.take()[1])
        if kind == "(":
            self.take()
            node = self.expr()
            self.take(")")
            return node
        if kind == "name":
            fname = self.take()[1]
            if fname not in FUNC_ARITY:
                raise ExpressionError(f"unknown function {fname!r} "
                                      f"in expression {self.text!r}")
            self.take("(")
            args = [self.take("name")[1]]
            while self.peek() == ",":
                self.take()
                args.append(self.take("name")[1])
            self.take(")")
            if len(args) != FUNC_ARITY[fname]:
                raise ExpressionError(f"{fname} takes {FUNC_ARITY[fname]} landmarks, "
                                      f"got {len(args)} in expression {self.text!r}")
            return ("call", fname, tuple(args))
        raise ExpressionError(f"unexpected {self.tokens[self.pos][1]!r} "
                              f"in expression {self.text!r}")


def _collect_names(node, out):
    if node[0] == "call":
        for name in node[2]:
            if name not in out:
                out.append(name)
    elif node[0] == "neg":
        _collect_names(node[1], out)
    elif node[0] in ("add", "sub", "div"):
        _collect_names(node[1], out)
        _collect_names(node[2], out)


@dataclass(frozen=True)
class MeasurementDef:
    """A named measurement expression over landmark names."""

    name: str
    expression: str
    landmark_ids: tuple[str, ...] = field(init=False, compare=False)
    tree: tuple = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        parser = _Parser(self.expression)
        tree = parser.expr()
        parser.take("end")
        names: list[str] = []
        _collect_names(tree, names)
        if not names:
            raise ExpressionError(f"expression {self.expression!r} uses no landmarks")
        object.__setattr__(self, "tree", tree)
        object.__setattr__(self, "landmark_ids", tuple(names))


@dataclass(frozen=True)
class ClassThresholds:
    """Strictly increasing breakpoints splitting the line into len+1 classes."""

    breakpoints: tuple[float, ...]
    labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.labels) != len(self.breakpoints) + 1:
            raise InvalidParameterError(
                f"need {len(self.breakpoints) + 1} labels for "
                f"{len(self.breakpoints)} breakpoints, got {len(self.labels)}")
        if len(set(self.labels)) != len(self.labels):
            raise InvalidParameterError(f"labels must be unique, got {self.labels}")
        if not all(math.isfinite(b) for b in self.breakpoints):
            raise InvalidParameterError("breakpoints must be finite")
        if any(b >= c for b, c in zip(self.breakpoints, self.breakpoints[1:])):
            raise InvalidParameterError(
                f"breakpoints must be strictly increasing, got {self.breakpoints}")


@dataclass(frozen=True)
class ClassificationResult:
    labels: tuple[str, ...]
    probs: tuple[float, ...]
    entropy_nats: float
    hard_class: str


# --- evaluation ------------------------------------------------------------------


def _eval(node, coords):
    """Evaluate over (n, 2) coordinate arrays; degenerate entries become NaN."""
    kind = node[0]
    if kind == "num":
        return np.full(next(iter(coords.values())).shape[0], node[1])
    if kind == "neg":
        return -_eval(node[1], coords)
    if kind in ("add", "sub", "div"):
        left = _eval(node[1], coords)
        right = _eval(node[2], coords)
        if kind == "add":
            return left + right
        if kind == "sub":
            return left - right
        with np.errstate(divide="ignore", invalid="ignore"):
            out = left / right
        return np.where(right == 0.0, np.nan, out)
    fname, args = node[1], node[2]
    pts = [coords[a] for a in args]
    if fname == "distance":
        d = pts[0] - pts[1]
        return np.hypot(d[:, 0], d[:, 1])
    if fname == "angle":
        u = pts[0] - pts[1]
        v = pts[2] - pts[1]
        nu = np.hypot(u[:, 0], u[:, 1])
        nv = np.hypot(v[:, 0], v[:, 1])
        denom = nu * nv
        with np.errstate(divide="ignore", invalid="ignore"):
            cos = (u * v).sum(axis=1) / denom
        cos = np.where(denom == 0.0, np.nan, np.clip(cos, -1.0, 1.0))
        return np.degrees(np.arccos(cos))
    # linedist: |cross(b - a, p - a)| / |b - a|
    p, a, b = pts
    d = b - a
    length = np.hypot(d[:, 0], d[:, 1])
    cross = d[:, 0] * (p[:, 1] - a[:, 1]) - d[:, 1] * (p[:, 0] - a[:, 0])
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.abs(cross) / length
    return np.where(length == 0.0, np.nan, out)


def evaluate_measurement(landmarks, mdef: MeasurementDef) -> float:
    """Evaluate one measurement on a dict of landmark name -> (x, y) in mm."""
    coords = {}
    for name in mdef.landmark_ids:
        if name not in landmarks:
            raise InvalidParameterError(
                f"measurement {mdef.name!r} needs landmark {name!r}")
        pt = np.asarray(landmarks[name], dtype=np.float64).reshape(1, 2)
        if not np.all(np.isfinite(pt)):
            raise InvalidParameterError(f"landmark {name!r} must be finite")
        coords[name] = pt
    value = float(_eval(mdef.tree, coords)[0])
    if math.isnan(value):
        raise DegenerateGeometryError(
            f"measurement {mdef.name!r} hit coincident points")
    return value


def classify(value: float, thresholds: ClassThresholds) -> str:
    """Label of the right-inclusive interval containing value."""
    if math.isnan(value):
        raise InvalidParameterError("cannot classify NaN")
    return thresholds.labels[bisect_left(thresholds.breakpoints, value)]


def entropy_nats(probs) -> float:
    p = np.asarray(probs, dtype=np.float64)
    p = p[p > 0.0]
    return float(-(p * np.log(p)).sum()) + 0.0


# --- Monte-Carlo propagation -------------------------------------------------------


def _draw(gaussians, names, n, rng):
    out = {}
    for name in names:
        g = gaussians[name]
        d = g.decomp
        z = rng.standard_normal((n, 2)) * (d.sigma_maj, d.sigma_min)
        c, s = math.cos(d.theta), math.sin(d.theta)
        rot = np.array([[c, -s], [s, c]])
        out[name] = z @ rot.T + g.mean
    return out


def mc_classify(predictions, mdef: MeasurementDef, thresholds: ClassThresholds,
                n: int = 10000, seed=0) -> ClassificationResult:
    """Propagate landmark uncertainty into class probabilities.

    Draws n joint samples (independent across landmarks), evaluates the
    measurement on each, and classifies.  Degenerate draws (coincident points)
    are re-drawn a bounded number of times.  Deterministic per seed.
    """
    if n < 1:
        raise InvalidParameterError(f"n must be >= 1, got {n}")
    for name in mdef.landmark_ids:
        if name not in predictions:
            raise InvalidParameterError(
                f"measurement {mdef.name!r} has no prediction for landmark {name!r}")
        predictions[name].decomp.validate()
    rng = np.random.default_rng(seed)
    coords = _draw(predictions, mdef.landmark_ids, n, rng)
    values = _eval(mdef.tree, coords)
    bad = np.nonzero(np.isnan(values))[0]
    for _ in range(MAX_REDRAWS):
        if bad.size == 0:
            break
        redraw = _draw(predictions, mdef.landmark_ids, bad.size, rng)
        for name in mdef.landmark_ids:
            coords[name][bad] = redraw[name]
        sub = {name: coords[name][bad] for name in mdef.landmark_ids}
        values[bad] = _eval(mdef.tree, sub)
        bad = np.nonzero(np.isnan(values))[0]
    if bad.size:
        raise DegenerateGeometryError(
            f"measurement {mdef.name!r} stayed degenerate after "
            f"{MAX_REDRAWS} redraws ({bad.size} of {n} samples)")
    idx = np.searchsorted(thresholds.breakpoints, values, side="left")
    counts = np.bincount(idx, minlength=len(thresholds.labels))
    probs = counts / n
    return ClassificationResult(thresholds.labels, tuple(float(p) for p in probs),
                                entropy_nats(probs),
                                thresholds.labels[int(np.argmax(probs))])


def accuracy_uncertainty_curve(image_ids, results, gt_labels):
    """Cumulative accuracy after sorting images by ascending entropy.

    Returns [(fraction_considered, accuracy_percent), ...] with one point per
    prefix of the sorted order; entropy ties break by image id.
    """
    if not (len(image_ids) == len(results) == len(gt_labels)):
        raise InvalidParameterError(
            f"length mismatch: {len(image_ids)} ids, {len(results)} results, "
            f"{len(gt_labels)} labels")
    if not image_ids:
        raise InvalidParameterError("need at least one image")
    order = sorted(range(len(image_ids)),
                   key=lambda i: (results[i].entropy_nats, image_ids[i]))
    curve = []
    correct = 0
    for k, i in enumerate(order, start=1):
        correct += results[i].hard_class == gt_labels[i]
        curve.append((k / len(order), 100.0 * correct / k))
    return curve


def write_curve_csv(path, curve) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["fraction", "accuracy_percent"])
        for fraction, accuracy in curve:
            writer.writerow([f"{fraction:.6f}", f"{accuracy:.6f}"])


# --- measurement config files -------------------------------------------------------


def measurements_from_config(items: dict[str, str]):
    """Parse `<name>.expression/.breakpoints/.labels` keys into definitions."""
    grouped: dict[str, dict[str, str]] = {}
    for key, value in items.items():
        name, dot, fieldname = key.partition(".")
        if not dot or fieldname not in ("expression", "breakpoints", "labels"):
            raise InvalidParameterError(f"unknown measurement config key {key!r}")
        grouped.setdefault(name, {})[fieldname] = value
    if not grouped:
        raise InvalidParameterError("no measurements defined")
    out = {}
    for name, fields in grouped.items():
        for required in ("expression", "breakpoints", "labels"):
            if required not in fields:
                raise InvalidParameterError(f"measurement {name!r} missing {required!r}")
        try:
            breakpoints = tuple(float(b) for b in fields["breakpoints"].split(","))
        except ValueError:
            raise InvalidParameterError(
                f"measurement {name!r}: bad breakpoints {fields['breakpoints']!r}") from None
        labels = tuple(lab.strip() for lab in fields["labels"].split(","))
        out[name] = (MeasurementDef(name, fields["expression"]),
                     ClassThresholds(breakpoints, labels))
    return out


def load_measurements(path=None):
    """Load a measurement config file (the shipped defaults when path is None)."""
    from .dataio import read_config_file

    return measurements_from_config(read_config_file(path or DEFAULT_MEASUREMENTS_PATH))
