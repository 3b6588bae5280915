"""The two- and three-component diffusion benchmarks."""
from __future__ import annotations

from .dd import Decomposition, InterfaceSpec, SubdomainSpec
from .fem import Segment
from .randfield import FieldConfig

# retained POD modes per interface kind
TRACE_MODES = 2
FLUX_MODES = 6
TRACE_THETA = 0.1
FLUX_THETA = 0.0


def two_component(h: float = 1.0 / 16, modes: int = 14, sigma: float = 0.5,
                  flux_method: str = "residual") -> Decomposition:
    """D = (0,2)x(0,1) split at x1 = 1; D1 takes the trace of D2, D2 the flux of D1."""
    subs = [
        SubdomainSpec(1, (0.0, 1.0, 0.0, 1.0), FieldConfig(2.0, sigma, 1.0, modes), Segment(0, 0.5, 0.0, 1.0)),
        SubdomainSpec(2, (1.0, 2.0, 0.0, 1.0), FieldConfig(2.0, sigma, 1.0, modes), Segment(0, 1.5, 0.0, 1.0)),
    ]
    itfs = [
        InterfaceSpec(2, 1, "dirichlet", TRACE_THETA, TRACE_MODES),
        InterfaceSpec(1, 2, "neumann", FLUX_THETA, FLUX_MODES),
    ]
    return Decomposition(subs, itfs, h=h, source=100.0, flux_method=flux_method)


def three_component(h: float = 1.0 / 16, modes: int = 14, sigma: float = 0.5,
                    flux_method: str = "residual") -> Decomposition:
    """D = (0,3)x(0,1) in a chain; the middle piece takes traces, the ends take fluxes."""
    subs = [
        SubdomainSpec(1, (0.0, 1.0, 0.0, 1.0), FieldConfig(3.0, sigma, 0.5, modes), Segment(0, 0.5, 0.0, 1.0)),
        SubdomainSpec(2, (1.0, 2.0, 0.0, 1.0), FieldConfig(2.0, sigma, 0.5, modes), Segment(1, 0.5, 1.0, 2.0)),
        SubdomainSpec(3, (2.0, 3.0, 0.0, 1.0), FieldConfig(3.0, sigma, 0.5, modes), Segment(0, 2.5, 0.0, 1.0)),
    ]
    itfs = [
        InterfaceSpec(1, 2, "dirichlet", TRACE_THETA, TRACE_MODES),
        InterfaceSpec(3, 2, "dirichlet", TRACE_THETA, TRACE_MODES),
        InterfaceSpec(2, 1, "neumann", FLUX_THETA, FLUX_MODES),
        InterfaceSpec(2, 3, "neumann", FLUX_THETA, FLUX_MODES),
    ]
    return Decomposition(subs, itfs, h=h, source=100.0, flux_method=flux_method)
