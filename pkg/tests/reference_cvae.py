"""Stand-alone CVAE reference trainer used as an oracle for the library loop.

Shares nothing with the package except the flat parameter layout: per layer,
a row-major ``(n_in, n_out)`` weight block followed by the bias.
"""
import math

import numpy as np


class PlainCvae:
    """Stand-alone first-order meta CVAE loop used as the reference for ``--cvae-only``."""

    def __init__(self, widths_e, widths_g, d_z, flat_e, flat_g):
        self.d_z = d_z
        self.we, self.wg = widths_e, widths_g
        self.e, self.g = flat_e.copy(), flat_g.copy()

    @staticmethod
    def layers(widths, flat):
        out, pos = [], 0
        for n_in, n_out in zip(widths[:-1], widths[1:]):
            W = flat[pos:pos + n_in * n_out].reshape(n_in, n_out)
            pos += n_in * n_out
            out.append((W, flat[pos:pos + n_out]))
            pos += n_out
        return out

    @staticmethod
    def forward(layers, h):
        acts = [h]
        for i, (W, b) in enumerate(layers):
            h = h @ W + b
            if i < len(layers) - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return acts

    @staticmethod
    def backward(layers, acts, g):
        grads = []
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            if i < len(layers) - 1:
                g = g * (acts[i + 1] > 0)
            grads.append((acts[i].T @ g, g.sum(axis=0)))
            g = g @ W.T
        grads.reverse()
        return np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads]), g

    def elbo(self, e, g, x, a, rng):
        B, k = x.shape[0], self.d_z
        le, lg = self.layers(self.we, e), self.layers(self.wg, g)
        ae = self.forward(le, np.hstack([x, a]))
        mu, raw = ae[-1][:, :k], ae[-1][:, k:]
        lv = np.clip(raw, -10.0, 10.0)
        eps = rng.standard_normal((B, k))
        sd = np.exp(0.5 * lv)
        z = mu + sd * eps
        ag = self.forward(lg, np.hstack([z, a]))
        r = ag[-1] - x
        value = 0.5 * np.sum(r * r) / B + 0.5 * np.sum(mu * mu + np.exp(lv) - lv - 1.0) / B
        dg, dinput = self.backward(lg, ag, r / B)
        dz = dinput[:, :k]
        dmu = dz + mu / B
        dlv = (0.5 * dz * eps * sd + 0.5 * (np.exp(lv) - 1.0) / B) * ((raw >= -10.0) & (raw <= 10.0))
        de, _ = self.backward(le, ae, np.hstack([dmu, dlv]))
        return value, de, dg

    def mean_elbo(self, e, g, sets, rng):
        vals, des, dgs = zip(*(self.elbo(e, g, x, a, rng) for x, a in sets))
        return sum(vals) / len(sets), sum(des) / len(sets), sum(dgs) / len(sets)

    def run(self, tasks_per_step, rng, eta, inner_steps, lr, b1=0.9, b2=0.999, eps=1e-8):
        moments = {"e": [np.zeros_like(self.e), np.zeros_like(self.e)],
                   "g": [np.zeros_like(self.g), np.zeros_like(self.g)]}
        trace = []
        for t, tasks in enumerate(tasks_per_step, start=1):
            e, g = self.e.copy(), self.g.copy()
            first = math.nan
            for s in range(inner_steps):
                v, de, dg = self.mean_elbo(e, g, [task.support for task in tasks], rng)
                if s == 0:
                    first = v
                e, g = e - eta * de, g - eta * dg
            out, de, dg = self.mean_elbo(e, g, [task.query for task in tasks], rng)
            for name, grad in (("e", de), ("g", dg)):
                m, v2 = moments[name]
                m[:] = b1 * m + (1 - b1) * grad
                v2[:] = b2 * v2 + (1 - b2) * grad * grad
                step = lr * (m / (1 - b1 ** t)) / (np.sqrt(v2 / (1 - b2 ** t)) + eps)
                setattr(self, name, getattr(self, name) - step)
            trace.append((t, first, out))
        return trace
