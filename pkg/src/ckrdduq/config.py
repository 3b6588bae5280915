"""Sectioned key-value pipeline configuration with line-numbered validation."""
from __future__ import annotations

import configparser
import hashlib
import re

import numpy as np
from dataclasses import dataclass, field

from .dd import Decomposition, DecompositionError, InterfaceSpec, SubdomainSpec
from .dduq import FlowRunConfig
from .fem import GridError, Segment, line_integral
from .randfield import FieldConfig
from .surrogate import SurrogateConfig


class ConfigError(ValueError):
    pass


@dataclass
class SamplingConfig:
    n_off: int = 10000
    n_on: int = 10000
    n_ref: int = 100000
    n_snap: int = 100
    seed: int = 0


@dataclass
class OutputConfig:
    thresholds: list = field(default_factory=list)
    pdf_points: int = 200


@dataclass
class BenchConfig:
    seed: int = 0
    cond_dims: list = field(default_factory=lambda: [8, 12, 14])
    n_train: int = 200000
    n_val: int = 1000000
    n_val_epoch: int = 100000
    epochs: int = 4
    batch_size: int = 1024


@dataclass
class PipelineConfig:
    decomposition: Decomposition
    sampling: SamplingConfig
    flow: FlowRunConfig
    surrogate: SurrogateConfig
    output: OutputConfig
    bench: BenchConfig
    text: str = ""

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()[:16]


class _Reader:
    """Typed access to a parsed file that knows where each key lives."""

    def __init__(self, text: str, source: str):
        self.text, self.source = text, source
        self.cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        self.cp.optionxform = str
        try:
            self.cp.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from exc
        self.lines = {}
        section = None
        for n, line in enumerate(text.splitlines(), 1):
            s = line.strip()
            m = re.match(r"^\[(.+)\]$", s)
            if m:
                section = m.group(1).strip()
                self.lines[(section, None)] = n
            elif section and "=" in s and not s.startswith((";", "#")):
                self.lines[(section, s.split("=", 1)[0].strip())] = n

    def where(self, section, key=None) -> str:
        n = self.lines.get((section, key)) or self.lines.get((section, None))
        return f"{self.source}:{n}" if n else self.source

    def fail(self, section, key, msg):
        raise ConfigError(f"{self.where(section, key)}: [{section}] {key + ': ' if key else ''}{msg}")

    def get(self, section, key, conv, default=None, check=None, what=""):
        if not self.cp.has_section(section) or not self.cp.has_option(section, key):
            if default is None:
                self.fail(section, key, "missing required key")
            return default
        raw = self.cp.get(section, key)
        try:
            val = conv(raw)
        except (TypeError, ValueError):
            self.fail(section, key, f"cannot parse {raw!r}")
        if check is not None and not check(val):
            self.fail(section, key, f"{raw!r} is invalid, expected {what}")
        return val


def _floats(raw):
    return [float(v) for v in raw.replace(",", " ").split()]


def _ints(raw):
    return [int(v) for v in raw.replace(",", " ").split()]


def _int_map(raw):
    out = {}
    for item in raw.replace(",", " ").split():
        k, v = item.split(":")
        out[int(k)] = int(v)
    return out


def _segment(raw):
    parts = raw.split()
    axis = {"vertical": 0, "horizontal": 1}[parts[0]]
    pos, a, b = (float(v) for v in parts[1:4])
    return Segment(axis, pos, a, b)


_POS = lambda v: v > 0
_NONNEG = lambda v: v >= 0


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    r = _Reader(text, source)
    for sec in ("problem", "dd", "sampling"):
        if not r.cp.has_section(sec):
            raise ConfigError(f"{source}: missing section [{sec}]")
    h = r.get("problem", "h", float, check=_POS, what="a positive mesh size")
    source_term = r.get("problem", "source", float, 100.0)
    flux = r.get("problem", "flux_method", str, "residual", lambda v: v in ("residual", "difference"),
                 "residual or difference")
    subs, itfs = [], []
    sub_secs = [s for s in r.cp.sections() if s.startswith("subdomain.")]
    if not sub_secs:
        raise ConfigError(f"{source}: no [subdomain.N] sections")
    for sec in sub_secs:
        try:
            sid = int(sec.split(".", 1)[1])
        except ValueError:
            r.fail(sec, None, "subdomain id must be an integer")
        rect = r.get(sec, "rect", _floats, check=lambda v: len(v) == 4 and v[1] > v[0] and v[3] > v[2],
                     what="x1_min, x1_max, x2_min, x2_max")
        try:
            fc = FieldConfig(r.get(sec, "mean", float, check=_POS, what="a positive mean"),
                             r.get(sec, "sigma", float, check=_NONNEG, what="sigma >= 0"),
                             r.get(sec, "corr_length", float, check=_POS, what="a positive length"),
                             r.get(sec, "modes", int, check=lambda v: v >= 1, what="at least one mode"))
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            r.fail(sec, None, str(exc))
        seg = r.get(sec, "output", _segment, check=lambda s: True) if r.cp.has_option(sec, "output") else None
        subs.append(SubdomainSpec(sid, tuple(rect), fc, seg))
    for sec in (s for s in r.cp.sections() if s.startswith("interface.")):
        try:
            _, a, b = sec.split(".")
            key = (int(a), int(b))
        except ValueError:
            r.fail(sec, None, "interface section must be named interface.SENDER.RECEIVER")
        itfs.append(InterfaceSpec(key[0], key[1],
                                  r.get(sec, "kind", str, check=lambda v: v in ("dirichlet", "neumann"),
                                        what="dirichlet or neumann"),
                                  r.get(sec, "theta", float, 1.0, _NONNEG, "theta >= 0"),
                                  r.get(sec, "modes", int, check=lambda v: v >= 1, what="at least one mode")))
    tol = r.get("dd", "tol", float, 1e-6, _POS, "a positive tolerance")
    max_steps = r.get("dd", "max_steps", int, 500, _POS, "a positive count")
    try:
        dec = Decomposition(subs, itfs, h=h, source=source_term, flux_method=flux, tol=tol, max_steps=max_steps)
    except (DecompositionError, GridError) as exc:
        raise ConfigError(f"{r.where('problem')}: {exc}") from exc
    for s in subs:
        if s.output is None:
            continue
        try:
            line_integral(dec.meshes[s.id], np.zeros(dec.meshes[s.id].n_nodes), s.output)
        except GridError as exc:
            r.fail(f"subdomain.{s.id}", "output", str(exc))

    count = lambda sec, key, d: r.get(sec, key, int, d, _POS, "a positive count")
    sampling = SamplingConfig(count("sampling", "n_off", 10000), count("sampling", "n_on", 0) or 0,
                              count("sampling", "n_ref", 100000), r.get("dd", "snapshots", int, 100, _POS, "a positive count"),
                              r.get("sampling", "seed", int, 0, _NONNEG, "a nonnegative seed"))
    if not r.cp.has_option("sampling", "n_on"):
        sampling.n_on = sampling.n_off
    flow = FlowRunConfig(
        stages=r.get("flow", "stages", _int_map, {}),
        layers=count("flow", "layers", 4),
        gamma=r.get("flow", "gamma", float, 0.6, lambda v: 0 < v < 1, "a value in (0, 1)"),
        width=count("flow", "width", 32),
        batch_size=count("flow", "batch_size", 256),
        epochs=count("flow", "epochs", 60),
        lr=r.get("flow", "lr", float, 1e-3, _POS, "a positive rate"),
        max_updates=r.get("flow", "max_updates", int, 2500, _NONNEG, "a nonnegative count"),
    )
    for sid, R in flow.stages.items():
        if sid not in dec.by_id or R < 1:
            r.fail("flow", "stages", f"invalid entry {sid}:{R}")
    sur = SurrogateConfig(
        width=count("surrogate", "width", 64), blocks=count("surrogate", "blocks", 5),
        lr=r.get("surrogate", "lr", float, 1e-3, _POS, "a positive rate"),
        batch_size=count("surrogate", "batch_size", 256), max_epochs=count("surrogate", "max_epochs", 400),
        patience=count("surrogate", "patience", 20),
        mse_ceiling=r.get("surrogate", "mse_ceiling", float, 1e-2, _POS, "a positive ceiling"),
        max_updates=r.get("surrogate", "max_updates", int, 15000, _NONNEG, "a nonnegative count"),
        min_samples=r.get("surrogate", "min_samples", int, 1000, _POS, "a positive count"),
    )
    out = OutputConfig(r.get("output", "thresholds", _floats, []), count("output", "pdf_points", 200))
    bench = BenchConfig(
        seed=r.get("bench", "seed", int, 0, _NONNEG, "a nonnegative seed"),
        cond_dims=r.get("bench", "cond_dims", _ints, [8, 12, 14], lambda v: all(0 < c < 16 for c in v), "values in 1..15"),
        n_train=count("bench", "n_train", 200000), n_val=count("bench", "n_val", 1000000),
        n_val_epoch=count("bench", "n_val_epoch", 100000), epochs=count("bench", "epochs", 4),
        batch_size=count("bench", "batch_size", 1024),
    )
    return PipelineConfig(dec, sampling, flow, sur, out, bench, text)


def load_config(path) -> PipelineConfig:
    with open(path) as fh:
        return parse_config(fh.read(), str(path))
