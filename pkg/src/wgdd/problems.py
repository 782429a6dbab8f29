"""Model problems -div(a grad u) + c u = f on the unit square with u = g on the boundary.

Field callables take points of shape ``(..., 2)`` and return arrays of shape ``(...)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = ["Problem", "test1", "test2", "test3", "manufactured", "PROBLEMS", "get_problem"]


@dataclass(frozen=True)
class Problem:
    name: str
    a: Callable
    c: Callable
    f: Callable
    g: Callable
    u: Optional[Callable] = None
    grad_u: Optional[Callable] = None


def _const(value):
    def field(xy):
        return np.full(np.shape(xy)[:-1], float(value))
    return field


def _bubble(t):
    return t * t * (1 - t) ** 2


def _bubble_d1(t):
    return 2 * t * (1 - t) * (1 - 2 * t)


def _bubble_d2(t):
    return 2 - 12 * t + 12 * t * t


def test1():
    """a = 2 - x(1-x), c = 1, u = 64 x^2(1-x)^2 y^2(1-y)^2."""

    def a(xy):
        x = xy[..., 0]
        return 2 - x * (1 - x)

    def u(xy):
        x, y = xy[..., 0], xy[..., 1]
        return 64 * _bubble(x) * _bubble(y)

    def grad_u(xy):
        x, y = xy[..., 0], xy[..., 1]
        return 64 * np.stack([_bubble_d1(x) * _bubble(y), _bubble(x) * _bubble_d1(y)], axis=-1)

    def f(xy):
        x, y = xy[..., 0], xy[..., 1]
        ux = 64 * _bubble_d1(x) * _bubble(y)
        lap = 64 * (_bubble_d2(x) * _bubble(y) + _bubble(x) * _bubble_d2(y))
        ax = 2 * x - 1
        return -(ax * ux + a(xy) * lap) + u(xy)

    return Problem("test1", a, _const(1.0), f, u, u, grad_u)


def test2():
    """a = 1, c = 0, u = 4(x - x^3)(y - y^3)."""

    def u(xy):
        x, y = xy[..., 0], xy[..., 1]
        return 4 * (x - x ** 3) * (y - y ** 3)

    def grad_u(xy):
        x, y = xy[..., 0], xy[..., 1]
        return 4 * np.stack([(1 - 3 * x * x) * (y - y ** 3), (x - x ** 3) * (1 - 3 * y * y)], axis=-1)

    def f(xy):
        x, y = xy[..., 0], xy[..., 1]
        return 24 * (x * (y - y ** 3) + y * (x - x ** 3))

    return Problem("test2", _const(1.0), _const(0.0), f, u, u, grad_u)


def test3():
    """Poisson problem with u = sin(pi x) sin(pi y)."""

    def u(xy):
        return np.sin(np.pi * xy[..., 0]) * np.sin(np.pi * xy[..., 1])

    def grad_u(xy):
        x, y = xy[..., 0], xy[..., 1]
        return np.pi * np.stack(
            [np.cos(np.pi * x) * np.sin(np.pi * y), np.sin(np.pi * x) * np.cos(np.pi * y)], axis=-1
        )

    def f(xy):
        return 2 * np.pi ** 2 * u(xy)

    return Problem("test3", _const(1.0), _const(0.0), f, u, u, grad_u)


def manufactured():
    """u = x + y: reproduced exactly by every element family."""

    def u(xy):
        return xy[..., 0] + xy[..., 1]

    def grad_u(xy):
        return np.broadcast_to(np.array([1.0, 1.0]), np.shape(xy)).copy()

    return Problem("manufactured", _const(1.0), _const(0.0), _const(0.0), u, u, grad_u)


PROBLEMS = {"test1": test1, "test2": test2, "test3": test3, "manufactured": manufactured}


def get_problem(name):
    try:
        return PROBLEMS[name]()
    except KeyError:
        raise ValueError(f"unknown test case {name!r}; choose from {sorted(PROBLEMS)}") from None
