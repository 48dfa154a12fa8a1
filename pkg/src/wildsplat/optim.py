"""Adam optimizer over tape tensors, with per-group learning rates."""

from __future__ import annotations

import numpy as np

from .errors import StateError
from .tensor import F32, clear_graph


class Adam:
    """Adam with bias correction.  Moments persist across steps.

    ``groups`` is a list of dicts: {"params": [Tensor, ...], "lr": float,
    "name": str}.  A bare parameter list is promoted to a single group.
    ``step()`` consumes the current tape: it clears the graph afterwards so
    no computation state leaks across iterations.
    """

    def __init__(self, params_or_groups, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if params_or_groups and isinstance(params_or_groups[0], dict):
            groups = params_or_groups
        else:
            groups = [{"params": list(params_or_groups), "lr": lr, "name": "all"}]
        self.groups = [
            {"params": list(g["params"]), "lr": float(g.get("lr", lr)), "name": g.get("name", str(i))}
            for i, g in enumerate(groups)
        ]
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [[np.zeros_like(p.data) for p in g["params"]] for g in self.groups]
        self.v = [[np.zeros_like(p.data) for p in g["params"]] for g in self.groups]

    def zero_grad(self):
        for g in self.groups:
            for p in g["params"]:
                p.grad = None

    def step(self, lr_scale=None):
        """One Adam update.  ``lr_scale`` maps group name -> multiplier."""
        for g in self.groups:
            for p in g["params"]:
                if p.grad is None:
                    raise StateError(f"parameter in group {g['name']!r} has no gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for gi, g in enumerate(self.groups):
            lr_eff = g["lr"]
            if lr_scale is not None:
                lr_eff *= lr_scale.get(g["name"], 1.0)
            for pi, p in enumerate(g["params"]):
                grad = p.grad.astype(np.float64)
                m = self.m[gi][pi] = b1 * self.m[gi][pi] + (1.0 - b1) * grad
                v = self.v[gi][pi] = b2 * self.v[gi][pi] + (1.0 - b2) * grad * grad
                mh = m / bc1
                vh = v / bc2
                p.data -= (lr_eff * mh / (np.sqrt(vh) + self.eps)).astype(F32)
        clear_graph()

    def state_arrays(self):
        """Flat name->array view of optimizer state, for checkpointing."""
        out = {"adam_t": np.asarray([self.t], dtype=np.float64)}
        for gi, g in enumerate(self.groups):
            for pi in range(len(g["params"])):
                out[f"adam_m_{gi}_{pi}"] = self.m[gi][pi]
                out[f"adam_v_{gi}_{pi}"] = self.v[gi][pi]
        return out

    def load_state_arrays(self, arrays):
        self.t = int(arrays["adam_t"][0])
        for gi, g in enumerate(self.groups):
            for pi in range(len(g["params"])):
                self.m[gi][pi] = arrays[f"adam_m_{gi}_{pi}"].astype(np.float64)
                self.v[gi][pi] = arrays[f"adam_v_{gi}_{pi}"].astype(np.float64)
