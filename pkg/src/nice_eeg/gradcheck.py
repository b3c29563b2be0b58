"""Finite-difference verification of every differentiable building block.

Each case runs at float64 on small random instances and samples at least
``n_points`` coordinates of every input.
"""
from __future__ import annotations

import time

import numpy as np

from . import numerics as nm
from .contrastive import info_nce, info_nce_backward, normalize_rows, normalize_rows_backward
from .encoders import (EncoderParams, HyperParams, ga_backward, ga_forward, init_params,
                       sa_backward, sa_forward, tsconv_backward, tsconv_forward)

SMALL = dict(C=4, T=40, D=6, k=3, m1=5, m2=7, s2=3)


def _case(name, forward, backward, inputs, n_points, seed, tol, exclude=None):
    return nm.check_gradients(forward, backward, inputs, tolerance=tol, n_points=n_points,
                              seed=seed, name=name, exclude=exclude)


def _layer_cases(rng, n_points, seed, tol):
    reports = []
    st = {}

    x = rng.standard_normal((3, 1, 4, 20))
    w = rng.standard_normal((3, 1, 1, 5))
    b = rng.standard_normal(3)

    def f(x, w, b):
        y, st["c"] = nm.temporal_conv_forward(x, w, b)
        return y

    def g(d):
        dx, dw, db = nm.temporal_conv_backward(d, st["c"])
        return {"x": dx, "w": dw, "b": db}
    reports.append(_case("temporal_conv", f, g, dict(x=x, w=w, b=b), n_points, seed, tol))

    def f(x):
        y, st["P"] = nm.avg_pool_forward(x, 7, 3)
        return y
    reports.append(_case("avg_pool", f, lambda d: {"x": nm.avg_pool_backward(d, st["P"])},
                         dict(x=rng.standard_normal((2, 3, 4, 22))), n_points, seed, tol))

    def f(x, w, b):
        y, st["c"] = nm.spatial_conv_forward(x, w, b)
        return y

    def g(d):
        dx, dw, db = nm.spatial_conv_backward(d, st["c"])
        return {"x": dx, "w": dw, "b": db}
    reports.append(_case("spatial_conv", f, g,
                         dict(x=rng.standard_normal((3, 3, 4, 6)),
                              w=rng.standard_normal((3, 3, 4, 1)), b=rng.standard_normal(3)),
                         n_points, seed, tol))

    for mode in ("train", "eval"):
        rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)

        def f(x, gamma, beta, mode=mode, rm=rm, rv=rv):
            y, st["c"], _ = nm.batch_norm_forward(x, gamma, beta, rm, rv, mode)
            return y

        def g(d):
            dx, dg, db = nm.batch_norm_backward(d, st["c"])
            return {"x": dx, "gamma": dg, "beta": db}
        reports.append(_case(f"batch_norm[{mode}]", f, g,
                             dict(x=rng.standard_normal((4, 3, 2, 5)),
                                  gamma=rng.uniform(0.5, 1.5, 3), beta=rng.standard_normal(3)),
                             n_points, seed, tol))

    def f(x):
        y, st["c"] = nm.elu_forward(x)
        return y
    reports.append(_case("elu", f, lambda d: {"x": nm.elu_backward(d, st["c"])},
                         dict(x=rng.standard_normal((4, 6))), n_points, seed, tol,
                         exclude={"x": lambda v: np.abs(v) < 1e-3}))

    def f(x, W, b):
        y, st["c"] = nm.linear_forward(x, W, b)
        return y

    def g(d):
        dx, dW, db = nm.linear_backward(d, st["c"])
        return {"x": dx, "W": dW, "b": db}
    reports.append(_case("linear", f, g,
                         dict(x=rng.standard_normal((4, 5)), W=rng.standard_normal((5, 3)),
                              b=rng.standard_normal(3)), n_points, seed, tol))

    def f(m):
        st["p"] = nm.softmax_rows(m)
        return st["p"]
    reports.append(_case("softmax", f, lambda d: {"m": nm.softmax_rows_backward(d, st["p"])},
                         dict(m=rng.standard_normal((4, 5))), n_points, seed, tol))

    T = 8
    def f(x, wq, wk, wv):
        y, st["c"] = sa_forward(x, wq, wk, wv)
        return y

    def g(d):
        dx, dq, dk, dv = sa_backward(d, st["c"])
        return {"x": dx, "wq": dq, "wk": dk, "wv": dv}
    reports.append(_case("self_attention", f, g,
                         dict(x=rng.standard_normal((2, 1, 5, T)),
                              wq=rng.standard_normal((T, T)) / np.sqrt(T),
                              wk=rng.standard_normal((T, T)) / np.sqrt(T),
                              wv=rng.standard_normal((T, T)) / np.sqrt(T)),
                         n_points, seed, tol))

    for residual in (True, False):
        def f(x, w, a, residual=residual):
            y, st["c"] = ga_forward(x, w, a, residual)
            return y

        def g(d):
            dx, dw, da = ga_backward(d, st["c"])
            return {"x": dx, "w": dw, "a": da}
        reports.append(_case(f"graph_attention[residual={residual}]", f, g,
                             dict(x=rng.standard_normal((2, 1, 5, T)),
                                  w=rng.standard_normal((T, T)) / np.sqrt(T),
                                  a=rng.standard_normal(2 * T)),
                             n_points, seed, tol))

    I = normalize_rows(rng.standard_normal((5, 6)))

    def f(E, t):
        Y = normalize_rows(E)
        st["Y"], st["n"], st["t"] = Y, np.linalg.norm(E, axis=1, keepdims=True), float(t)
        loss, st["dl"] = info_nce(Y, I, float(t))
        return np.array(loss)

    def g(d):
        dY, dt = info_nce_backward(st["dl"] * float(d), st["Y"], I, st["t"])
        return {"E": normalize_rows_backward(dY, st["Y"], st["n"]), "t": np.array(dt)}
    reports.append(_case("info_nce", f, g,
                         dict(E=rng.standard_normal((5, 6)), t=np.array(np.log(1 / 0.07))),
                         n_points, seed, tol))
    return reports


def _encoder_cases(rng, n_points, seed, tol):
    reports = []
    for mode in ("train", "eval"):
        for module in ("none", "sa", "ga"):
            h = HyperParams(spatial_module=module, **SMALL)
            p = init_params(h, seed, np.float64)
            p.buffers["bn1_mean"][:] = 0.1
            p.buffers["bn1_var"][:] = 0.7
            st = {}

            def f(x, h=h, p=p, mode=mode, **tensors):
                feats, st["c"] = tsconv_forward(x, EncoderParams(h, tensors, p.buffers), mode)
                return feats

            def g(d, h=h):
                return tsconv_backward(d, st["c"], h, need_input_grad=True)
            inputs = {k: v for k, v in p.tensors.items() if k != "logit_scale"}
            inputs["x"] = rng.standard_normal((5, 1, h.C, h.T))
            reports.append(_case(f"encoder[{module},{mode}]", f, g, inputs, n_points, seed, tol))
    return reports


def run_suite(n_points=10, seed=0, tolerance=1e-4):
    """All layer checks followed by the composite encoder.

    Returns ``(reports, seconds)``.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    reports = _layer_cases(rng, n_points, seed, tolerance)
    reports += _encoder_cases(rng, n_points, seed, tolerance)
    return reports, time.perf_counter() - t0
