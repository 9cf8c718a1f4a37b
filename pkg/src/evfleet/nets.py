"""Small-tensor neural kernels over explicit parameter dicts.

Every network is a flat dict name -> torch.float64 tensor, and every
forward is a pure function of (params, inputs). Nothing here owns
hidden state, which keeps fast-weight clones trivial: an update produced
by autograd is just another dict in the same shape, still attached to
the graph it came from.

torch supplies the tensor ops and reverse-mode gradients; the layer math
itself (graph attention, squashed-Gaussian densities, the checker) is
defined in this file.
"""
from __future__ import annotations

import io
import json
import math
import zipfile

import numpy as np
import torch

torch.set_num_threads(1)

LOG_2PI = math.log(2.0 * math.pi)
EPS_NUM = 1e-6
LOGSTD_MIN = -20.0
LOGSTD_MAX = 2.0

Params = dict


class NetError(ValueError):
    pass


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> torch.Tensor:
    bound = 1.0 / math.sqrt(max(1, fan_in))
    arr = rng.uniform(-bound, bound, size=shape)
    return torch.tensor(arr, dtype=torch.float64, requires_grad=True)


def tensor(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=torch.float64)


# ------------------------------------------------------------ dense nets

def dense_params(name: str, widths, rng) -> Params:
    """Affine stack; widths = [in, hidden..., out]. No hidden layers is
    a plain affine map, which the loss spreadsheets rely on."""
    p = {}
    for i in range(len(widths) - 1):
        p[f"{name}.w{i}"] = uniform_init(rng, (widths[i], widths[i + 1]), widths[i])
        p[f"{name}.b{i}"] = uniform_init(rng, (widths[i + 1],), widths[i])
    return p


def dense_forward(params: Params, name: str, x: torch.Tensor) -> torch.Tensor:
    i = 0
    while f"{name}.w{i}" in params:
        x = x @ params[f"{name}.w{i}"] + params[f"{name}.b{i}"]
        if f"{name}.w{i + 1}" in params:
            x = torch.relu(x)
        i += 1
    if i == 0:
        raise NetError(f"no layers under {name!r}")
    return x


# -------------------------------------------------------- graph attention

def gat_params(name, f_in, f_dim, heads, f_out, rng) -> Params:
    return {
        f"{name}.W": uniform_init(rng, (heads, f_in, f_dim), f_in),
        f"{name}.a": uniform_init(rng, (heads, 2 * f_dim), 2 * f_dim),
        f"{name}.Wf": uniform_init(rng, (heads * f_dim, f_out), heads * f_dim),
        f"{name}.af": uniform_init(rng, (2 * f_out,), 2 * f_out),
    }


def _attend(scores: torch.Tensor, slope: float) -> torch.Tensor:
    return torch.softmax(torch.nn.functional.leaky_relu(scores, slope), dim=-1)


def gat_forward(params, name, feats, neighbors, slope=0.2,
                with_attention=False):
    """Two-stage attention: multi-head concat, then single-head fusion.

    feats: (J, F_in). neighbors: per-node iterables of region ids; a self
    loop is added and the list sorted, so storage order never matters and
    a region with no listed neighbours still attends to itself. With
    with_attention=True also returns the per-stage softmax rows.
    """
    w = params[f"{name}.W"]
    att = params[f"{name}.a"]
    heads, _, f_dim = w.shape
    wh = torch.einsum("jf,hfd->hjd", feats, w)  # (H, J, F')
    src = (att[:, :f_dim].unsqueeze(1) * wh).sum(-1)   # (H, J) score of i-part
    dst = (att[:, f_dim:].unsqueeze(1) * wh).sum(-1)   # (H, J) score of j-part

    nbr = [sorted(set(ns) | {i}) for i, ns in enumerate(neighbors)]
    rows_multi, rows_fuse = [], []
    hidden = []
    for i, ns in enumerate(nbr):
        idx = torch.tensor(ns, dtype=torch.long)
        alpha = _attend(src[:, i].unsqueeze(1) + dst[:, idx], slope)
        rows_multi.append(alpha)
        agg = torch.nn.functional.elu((alpha.unsqueeze(-1) * wh[:, idx]).sum(1))
        hidden.append(agg.reshape(-1))               # concat heads
    hhat = torch.stack(hidden)                       # (J, H*F')

    g = hhat @ params[f"{name}.Wf"]                  # (J, F_out)
    f_out = g.shape[1]
    af = params[f"{name}.af"]
    src_f = (g * af[:f_out]).sum(-1)
    dst_f = (g * af[f_out:]).sum(-1)
    out = []
    for i, ns in enumerate(nbr):
        idx = torch.tensor(ns, dtype=torch.long)
        alpha = _attend(src_f[i] + dst_f[idx], slope)
        rows_fuse.append(alpha)
        out.append(torch.nn.functional.elu((alpha.unsqueeze(-1) * g[idx]).sum(0)))
    stacked = torch.stack(out)
    if with_attention:
        return stacked, (rows_multi, rows_fuse)
    return stacked


# ------------------------------------------------- tanh-Gaussian policies

def policy_params(name, in_dim, hidden, layers, act_dim, rng) -> Params:
    """Shared trunk, mean and log-std split off the final affine layer."""
    widths = [in_dim] + [hidden] * layers + [2 * act_dim]
    return dense_params(name, widths, rng)


def policy_forward(params, name, x, lo=LOGSTD_MIN, hi=LOGSTD_MAX):
    out = dense_forward(params, name, x)
    mu, raw = out.chunk(2, dim=-1)
    return mu, torch.clamp(raw, lo, hi)


def tanh_gaussian_sample(mu, log_std, eps):
    """Squash a reparameterized Gaussian draw; eps is caller-supplied.

    Returns (action, log-probability summed over the last axis); the
    density includes the tanh change-of-variable correction.
    """
    eps = tensor(eps)
    std = torch.exp(log_std)
    ahat = mu + std * eps
    action = torch.tanh(ahat)
    logp = (
        -0.5 * LOG_2PI - log_std - 0.5 * eps**2
        - torch.log(1.0 - action**2 + EPS_NUM)
    )
    return action, logp.sum(dim=-1)


# ------------------------------------------------------- temporal lookup

def temporal_params(name, periods, dim, rng) -> Params:
    return {f"{name}.E": uniform_init(rng, (periods, dim), dim)}


def temporal_row(params, name, t: int) -> torch.Tensor:
    return params[f"{name}.E"][t]


# -------------------------------------------------------- action rescale

def rescale_action(a, lo, hi):
    """Affine map of (-1,1) onto (lo, hi) per dimension."""
    lo = tensor(lo)
    hi = tensor(hi)
    if bool((lo >= hi).any()):
        raise NetError("rescale range needs lo < hi in every dimension")
    return lo + (tensor(a) + 1.0) * 0.5 * (hi - lo)


def inverse_rescale(x, lo, hi):
    lo = tensor(lo)
    hi = tensor(hi)
    if bool((lo >= hi).any()):
        raise NetError("rescale range needs lo < hi in every dimension")
    return (tensor(x) - lo) * 2.0 / (hi - lo) - 1.0


# ----------------------------------------------------- gradient checking

def grad_check(loss_fn, params: Params, eps_fd=1e-5, max_coords=40, seed=0):
    """Central-difference audit of autograd.

    Returns max |analytic - numeric| / max(1, |numeric|) over a
    deterministic coordinate sample (all coordinates when a tensor has
    at most max_coords of them).
    """
    loss = loss_fn(params)
    if not torch.isfinite(loss):
        raise NetError(f"non-finite loss {loss.item()!r} in grad_check")
    names = sorted(params)
    leaves = [params[n] for n in names]
    grads = torch.autograd.grad(loss, leaves, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p, g in zip(names, leaves, grads):
        flat = p.detach().reshape(-1)
        count = flat.numel()
        coords = (
            range(count) if count <= max_coords
            else sorted(rng.choice(count, size=max_coords, replace=False))
        )
        gflat = (
            torch.zeros_like(flat) if g is None else g.detach().reshape(-1)
        )
        for c in coords:
            orig = float(flat[c])
            with torch.no_grad():
                flat[c] = orig + eps_fd
                hi = float(loss_fn(params))
                flat[c] = orig - eps_fd
                lo = float(loss_fn(params))
                flat[c] = orig
            numeric = (hi - lo) / (2 * eps_fd)
            err = abs(float(gflat[c]) - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


# ------------------------------------------------------- dict management

def subset(params: Params, *prefixes) -> Params:
    out = {}
    for k, v in params.items():
        if any(k == p or k.startswith(p + ".") for p in prefixes):
            out[k] = v
    return out


def detach_all(params: Params) -> Params:
    return {k: v.detach() for k, v in params.items()}


def clone_leaves(params: Params) -> Params:
    return {
        k: v.detach().clone().requires_grad_(True) for k, v in params.items()
    }


def flat_values(params: Params) -> np.ndarray:
    parts = [params[k].detach().numpy().reshape(-1) for k in sorted(params)]
    return np.concatenate(parts) if parts else np.zeros(0)


# ------------------------------------------------------------ checkpoints

CHECKPOINT_VERSION = 1


def save_params(path, tree: dict, extra: dict | None = None) -> None:
    """tree: group name -> params dict. Raw float64 bytes + JSON manifest,
    exact round-trip, no pickle anywhere."""
    manifest = {"version": CHECKPOINT_VERSION, "groups": {}, "extra": extra or {}}
    blobs = {}
    for group in sorted(tree):
        entries = {}
        for name in sorted(tree[group]):
            t = tree[group][name]
            src = t.detach().numpy()
            # ascontiguousarray promotes 0-dim to (1,), so record the
            # true shape first
            arr = np.ascontiguousarray(src, dtype="<f8")
            entries[name] = list(src.shape)
            blobs[f"{group}/{name}.f64"] = arr.tobytes()
        manifest["groups"][group] = entries
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, sort_keys=True))
        for blob_name in sorted(blobs):
            zf.writestr(blob_name, blobs[blob_name])


def load_params(path) -> tuple[dict, dict]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise NetError(
                f"checkpoint version {manifest.get('version')!r} unsupported"
            )
        tree = {}
        for group, entries in manifest["groups"].items():
            params = {}
            for name, shape in entries.items():
                raw = zf.read(f"{group}/{name}.f64")
                arr = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
                params[name] = torch.tensor(arr, dtype=torch.float64,
                                            requires_grad=True)
            tree[group] = params
    return tree, manifest.get("extra", {})
