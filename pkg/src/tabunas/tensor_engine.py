"""Minimal dense-tensor runtime for the fixed op set.

Executes `GraphPlan` node lists on numpy float32 arrays: seeded fan-in
initialization, forward with optional activation-sign capture, exact
reverse-mode gradients, an Adam optimizer step and the training-rate
schedule.  Tensors are plain (batch, channels, height, width) ndarrays.

All convolutions run as explicit kernel-offset accumulations: forward
gathers strided input slices, backward scatters into the padded input
gradient with the mirrored slices, so the two index maps cannot drift
apart.  Norm layers use batch statistics while training and running
averages at eval time.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .net_graph import GraphPlan, LayerNode, NodeKind

DTYPE = np.float32

NORM_EPS = 1e-5
NORM_MOMENTUM = 0.1

LOSS_KINDS = ("l1", "l2", "ce")


class EngineError(RuntimeError):
    pass


class NonFiniteError(EngineError):
    """A NaN or Inf appeared where finite values are required."""


@dataclass
class AdamHyper:
    lr: float = 7e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class ActivationTrace:
    """Per-batch-element sign bits of every ReLU pre-activation, in node order."""

    codes: np.ndarray  # (batch, n_units) bool
    node_units: tuple[tuple[int, int], ...]  # (node index, units per element)

    @property
    def units_per_element(self) -> int:
        return int(self.codes.shape[1])


@dataclass
class ParamStore:
    """Flattened parameters plus gradient/moment vectors and norm statistics."""

    params: np.ndarray
    grads: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    slots: dict  # (node_index, name) -> (offset, shape)
    norm_mean: dict  # node_index -> (channels,) float32
    norm_var: dict

    def view(self, node_index: int, name: str) -> np.ndarray:
        offset, shape = self.slots[(node_index, name)]
        size = int(np.prod(shape))
        return self.params[offset : offset + size].reshape(shape)

    def grad_view(self, node_index: int, name: str) -> np.ndarray:
        offset, shape = self.slots[(node_index, name)]
        size = int(np.prod(shape))
        return self.grads[offset : offset + size].reshape(shape)

    def __len__(self) -> int:
        return int(self.params.size)


def init_params(plan: GraphPlan, rng_seed: int) -> ParamStore:
    """Fan-in-scaled normal init for conv weights, identity norms, zero biases."""
    total = sum(node.param_count for node in plan.nodes)
    params = np.zeros(total, dtype=DTYPE)
    slots: dict = {}
    offset = 0
    rng = np.random.default_rng(rng_seed)
    norm_mean: dict = {}
    norm_var: dict = {}
    for node in plan.nodes:
        for slot in node.params:
            size = slot.count
            view = params[offset : offset + size].reshape(slot.shape)
            slots[(node.index, slot.name)] = (offset, slot.shape)
            if node.kind is NodeKind.CONV and slot.name == "weight":
                fan_in = slot.shape[1] * slot.shape[2] * slot.shape[3]
                std = np.sqrt(2.0 / fan_in)
                view[...] = rng.standard_normal(slot.shape, dtype=DTYPE) * DTYPE(std)
            elif node.kind is NodeKind.NORM and slot.name == "gamma":
                view[...] = 1.0
            # biases and beta stay zero
            offset += size
        if node.kind is NodeKind.NORM:
            channels = node.out_channels
            norm_mean[node.index] = np.zeros(channels, dtype=DTYPE)
            norm_var[node.index] = np.ones(channels, dtype=DTYPE)
    return ParamStore(
        params=params,
        grads=np.zeros_like(params),
        adam_m=np.zeros_like(params),
        adam_v=np.zeros_like(params),
        slots=slots,
        norm_mean=norm_mean,
        norm_var=norm_var,
    )


# --- primitive ops -----------------------------------------------------------


def _conv_forward(x, w, bias, stride, groups):
    batch, cin, h, w_in = x.shape
    cout, cg, kh, kw = w.shape
    sh, sw = stride
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w_in + 2 * pw - kw) // sw + 1
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    y = np.zeros((batch, cout, ho, wo), dtype=x.dtype)
    if groups == cin and cout == cin and cg == 1:  # depthwise
        for i in range(kh):
            hs = slice(i, i + sh * (ho - 1) + 1, sh)
            for j in range(kw):
                ws = slice(j, j + sw * (wo - 1) + 1, sw)
                y += xp[:, :, hs, ws] * w[:, 0, i, j][None, :, None, None]
    else:
        og = cout // groups
        for g in range(groups):
            ci, co = g * cg, g * og
            xg = xp[:, ci : ci + cg]
            wg = w[co : co + og]
            for i in range(kh):
                hs = slice(i, i + sh * (ho - 1) + 1, sh)
                for j in range(kw):
                    ws = slice(j, j + sw * (wo - 1) + 1, sw)
                    y[:, co : co + og] += np.einsum(
                        "bchw,oc->bohw", xg[:, :, hs, ws], wg[:, :, i, j],
                        optimize=True,
                    )
    y += bias[None, :, None, None]
    return y


def _conv_backward(x, w, dy, stride, groups):
    batch, cin, h, w_in = x.shape
    cout, cg, kh, kw = w.shape
    sh, sw = stride
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    ho, wo = dy.shape[2], dy.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    db = dy.sum(axis=(0, 2, 3))
    if groups == cin and cout == cin and cg == 1:  # depthwise
        for i in range(kh):
            hs = slice(i, i + sh * (ho - 1) + 1, sh)
            for j in range(kw):
                ws = slice(j, j + sw * (wo - 1) + 1, sw)
                patch = xp[:, :, hs, ws]
                dw[:, 0, i, j] = (dy * patch).sum(axis=(0, 2, 3))
                dxp[:, :, hs, ws] += dy * w[:, 0, i, j][None, :, None, None]
    else:
        og = cout // groups
        for g in range(groups):
            ci, co = g * cg, g * og
            dyg = dy[:, co : co + og]
            wg = w[co : co + og]
            for i in range(kh):
                hs = slice(i, i + sh * (ho - 1) + 1, sh)
                for j in range(kw):
                    ws = slice(j, j + sw * (wo - 1) + 1, sw)
                    patch = xp[:, ci : ci + cg, hs, ws]
                    dw[co : co + og, :, i, j] = np.einsum(
                        "bohw,bchw->oc", dyg, patch, optimize=True
                    )
                    dxp[:, ci : ci + cg, hs, ws] += np.einsum(
                        "bohw,oc->bchw", dyg, wg[:, :, i, j], optimize=True
                    )
    dx = dxp[:, :, ph : ph + h, pw : pw + w_in] if (ph or pw) else dxp
    return dx, dw, db


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _pixel_shuffle(x, r):
    b, c, h, w = x.shape
    co = c // (r * r)
    y = x.reshape(b, co, r, r, h, w)
    y = y.transpose(0, 1, 4, 2, 5, 3)
    return y.reshape(b, co, h * r, w * r)


def _pixel_unshuffle(dy, r):
    b, co, hr, wr = dy.shape
    h, w = hr // r, wr // r
    y = dy.reshape(b, co, h, r, w, r)
    y = y.transpose(0, 1, 3, 5, 2, 4)
    return y.reshape(b, co * r * r, h, w)


# --- forward -----------------------------------------------------------------


def _consumer_counts(plan: GraphPlan) -> list[int]:
    counts = [0] * len(plan.nodes)
    for node in plan.nodes:
        for idx in node.inputs:
            counts[idx] += 1
    counts[plan.output_index] += 1
    return counts


def _run_nodes(plan, store, batch, training, update_stats, capture, keep_all,
               check_finite=False):
    outputs: list = [None] * len(plan.nodes)
    aux: dict = {}
    bits: list = []
    node_units: list = []
    remaining = _consumer_counts(plan) if not keep_all else None

    for node in plan.nodes:
        if node.kind is NodeKind.INPUT:
            y = batch
        else:
            xs = [outputs[i] for i in node.inputs]
            y = _node_forward(node, store, xs, aux, training, update_stats,
                              capture, bits, node_units)
        if check_finite and not np.all(np.isfinite(y)):
            raise NonFiniteError(f"non-finite values at node {node.name}")
        outputs[node.index] = y
        if remaining is not None:
            for idx in node.inputs:
                remaining[idx] -= 1
                if remaining[idx] == 0:
                    outputs[idx] = None
    trace = None
    if capture:
        codes = (
            np.concatenate(bits, axis=1)
            if bits
            else np.zeros((batch.shape[0], 0), dtype=bool)
        )
        trace = ActivationTrace(codes=codes, node_units=tuple(node_units))
    return outputs, aux, trace


def _node_forward(node, store, xs, aux, training, update_stats, capture, bits,
                  node_units):
    kind = node.kind
    x = xs[0]
    if kind is NodeKind.CONV:
        w = store.view(node.index, "weight")
        b = store.view(node.index, "bias")
        return _conv_forward(x, w, b, node.stride, node.groups)
    if kind is NodeKind.NORM:
        gamma = store.view(node.index, "gamma")
        beta = store.view(node.index, "beta")
        if training:
            mu = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            if update_stats:
                store.norm_mean[node.index] *= 1.0 - NORM_MOMENTUM
                store.norm_mean[node.index] += NORM_MOMENTUM * mu
                store.norm_var[node.index] *= 1.0 - NORM_MOMENTUM
                store.norm_var[node.index] += NORM_MOMENTUM * var
        else:
            mu = store.norm_mean[node.index]
            var = store.norm_var[node.index]
        inv = 1.0 / np.sqrt(var + NORM_EPS)
        xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
        aux[node.index] = (xhat, inv.astype(x.dtype), training)
        return gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    if kind is NodeKind.RELU:
        if capture:
            pre = x > 0
            bits.append(pre.reshape(pre.shape[0], -1))
            node_units.append((node.index, int(np.prod(pre.shape[1:]))))
        return np.maximum(x, 0)
    if kind is NodeKind.SIGMOID:
        y = _sigmoid(x)
        aux[node.index] = y
        return y
    if kind is NodeKind.GAP:
        return x.mean(axis=(2, 3), keepdims=True)
    if kind is NodeKind.MUL:
        return x * xs[1]
    if kind is NodeKind.ADD:
        return x + xs[1]
    if kind is NodeKind.AVGPOOL2:
        b, c, h, w = x.shape
        return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    if kind is NodeKind.UPSAMPLE2:
        return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)
    if kind is NodeKind.PIXELSHUFFLE:
        return _pixel_shuffle(x, node.factor)
    raise AssertionError(kind)  # pragma: no cover


def _validate_batch(plan: GraphPlan, batch: np.ndarray):
    if batch.ndim != 4:
        raise EngineError(f"batch must be 4-d, got shape {batch.shape}")
    if batch.shape[1] != plan.spec.in_channels:
        raise EngineError(
            f"batch has {batch.shape[1]} channels, plan expects {plan.spec.in_channels}"
        )
    need = 2 ** (plan.spec.num_scales - 1)
    if batch.shape[2] % need or batch.shape[3] % need:
        raise EngineError(
            f"batch spatial {batch.shape[2]}x{batch.shape[3]} not divisible by {need}"
        )


def forward(plan: GraphPlan, store: ParamStore, batch: np.ndarray,
            capture: bool = False, training: bool = False,
            update_stats: bool | None = None, check_finite: bool = False):
    """Run the plan on a batch; with `capture`, also return the sign trace."""
    _validate_batch(plan, batch)
    if update_stats is None:
        update_stats = training
    outputs, _, trace = _run_nodes(
        plan, store, batch, training, update_stats, capture,
        keep_all=False, check_finite=check_finite,
    )
    out = outputs[plan.output_index]
    if capture:
        return out, trace
    return out


# --- losses and backward -----------------------------------------------------


def _loss_and_grad(pred: np.ndarray, target: np.ndarray, loss_kind: str):
    if loss_kind not in LOSS_KINDS:
        raise EngineError(f"unknown loss kind {loss_kind!r}")
    if loss_kind == "ce":
        if pred.shape != target.shape:
            raise EngineError(f"loss shapes differ: {pred.shape} vs {target.shape}")
        z = pred - pred.max(axis=1, keepdims=True)
        ez = np.exp(z)
        soft = ez / ez.sum(axis=1, keepdims=True)
        pixels = pred.shape[0] * pred.shape[2] * pred.shape[3]
        logsoft = z - np.log(ez.sum(axis=1, keepdims=True))
        loss = float(-(target * logsoft).sum() / pixels)
        dpred = (soft - target) / pixels
        return loss, dpred.astype(pred.dtype)
    if pred.shape != target.shape:
        raise EngineError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    n = diff.size
    if loss_kind == "l1":
        loss = float(np.abs(diff).mean())
        dpred = np.sign(diff) / n
    else:
        loss = float((diff * diff).mean())
        dpred = 2.0 * diff / n
    return loss, dpred.astype(pred.dtype)


def _accum(slots: list, idx: int, arr: np.ndarray, may_share: bool):
    if slots[idx] is None:
        slots[idx] = arr if may_share and arr.flags.writeable else arr.copy()
    else:
        slots[idx] += arr


def backward(plan: GraphPlan, store: ParamStore, batch: np.ndarray,
             target: np.ndarray, loss_kind: str, training: bool = True,
             update_stats: bool = False):
    """Mean loss and its exact gradient w.r.t. every parameter.

    Fills `store.grads` and returns (loss, grads).  Norm layers use batch
    statistics; pass `update_stats` to also refresh the running averages.
    """
    _validate_batch(plan, batch)
    outputs, aux, _ = _run_nodes(
        plan, store, batch, training, update_stats=update_stats, capture=False,
        keep_all=True,
    )
    pred = outputs[plan.output_index]
    loss, dpred = _loss_and_grad(pred, target, loss_kind)
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite loss")

    store.grads[:] = 0.0
    dslots: list = [None] * len(plan.nodes)
    dslots[plan.output_index] = dpred
    for node in reversed(plan.nodes):
        dy = dslots[node.index]
        if dy is None or node.kind is NodeKind.INPUT:
            continue
        _node_backward(node, store, outputs, aux, dy, dslots)
        dslots[node.index] = None
    return loss, store.grads


def _node_backward(node, store, outputs, aux, dy, dslots):
    kind = node.kind
    x = outputs[node.inputs[0]]
    if kind is NodeKind.CONV:
        w = store.view(node.index, "weight")
        dx, dw, db = _conv_backward(x, w, dy, node.stride, node.groups)
        store.grad_view(node.index, "weight")[...] += dw
        store.grad_view(node.index, "bias")[...] += db
        _accum(dslots, node.inputs[0], dx, may_share=True)
        return
    if kind is NodeKind.NORM:
        gamma = store.view(node.index, "gamma")
        xhat, inv, was_training = aux[node.index]
        store.grad_view(node.index, "gamma")[...] += (dy * xhat).sum(axis=(0, 2, 3))
        store.grad_view(node.index, "beta")[...] += dy.sum(axis=(0, 2, 3))
        dxhat = dy * gamma[None, :, None, None]
        if was_training:
            mean_d = dxhat.mean(axis=(0, 2, 3), keepdims=True)
            mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            dx = inv[None, :, None, None] * (dxhat - mean_d - xhat * mean_dx)
        else:
            dx = inv[None, :, None, None] * dxhat
        _accum(dslots, node.inputs[0], dx, may_share=True)
        return
    if kind is NodeKind.RELU:
        _accum(dslots, node.inputs[0], dy * (x > 0), may_share=True)
        return
    if kind is NodeKind.SIGMOID:
        y = aux[node.index]
        _accum(dslots, node.inputs[0], dy * y * (1.0 - y), may_share=True)
        return
    if kind is NodeKind.GAP:
        h, w = x.shape[2], x.shape[3]
        dx = np.broadcast_to(dy / (h * w), x.shape)
        _accum(dslots, node.inputs[0], dx, may_share=False)
        return
    if kind is NodeKind.MUL:
        gate = outputs[node.inputs[1]]
        _accum(dslots, node.inputs[0], dy * gate, may_share=True)
        _accum(dslots, node.inputs[1], (dy * x).sum(axis=(2, 3), keepdims=True),
               may_share=True)
        return
    if kind is NodeKind.ADD:
        _accum(dslots, node.inputs[0], dy, may_share=True)
        _accum(dslots, node.inputs[1], dy, may_share=False)
        return
    if kind is NodeKind.AVGPOOL2:
        dx = np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3) / 4.0
        _accum(dslots, node.inputs[0], dx.astype(dy.dtype), may_share=True)
        return
    if kind is NodeKind.UPSAMPLE2:
        b, c, h, w = x.shape
        dx = dy.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5))
        _accum(dslots, node.inputs[0], dx, may_share=True)
        return
    if kind is NodeKind.PIXELSHUFFLE:
        _accum(dslots, node.inputs[0], _pixel_unshuffle(dy, node.factor),
               may_share=True)
        return
    raise AssertionError(kind)  # pragma: no cover


# --- optimizer ---------------------------------------------------------------


def adam_step(store: ParamStore, grads: np.ndarray, hyper: AdamHyper, t: int) -> ParamStore:
    """Standard bias-corrected Adam update, in place."""
    if t < 1:
        raise EngineError("adam step count starts at 1")
    store.adam_m *= hyper.beta1
    store.adam_m += (1.0 - hyper.beta1) * grads
    store.adam_v *= hyper.beta2
    store.adam_v += (1.0 - hyper.beta2) * (grads * grads)
    m_hat = store.adam_m / (1.0 - hyper.beta1 ** t)
    v_hat = store.adam_v / (1.0 - hyper.beta2 ** t)
    store.params -= (hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)).astype(DTYPE)
    return store


def lr_schedule(epoch: int, base_lr: float = 7e-4) -> float:
    """Constant until epoch 10, then multiplied by 0.95 every 5 epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < 10:
        return base_lr
    return base_lr * 0.95 ** ((epoch - 10) // 5 + 1)


# --- parameter checkpoints ---------------------------------------------------

_CKPT_MAGIC = b"TBNCKPT1"


def save_params(store: ParamStore, path: str):
    """Versioned binary: header, offsets table, little-endian float payloads."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<IQII", 1, store.params.size, len(store.slots),
                             len(store.norm_mean)))
        for (node_index, name), (offset, shape) in sorted(store.slots.items()):
            raw = name.encode("ascii")
            fh.write(struct.pack("<IB", node_index, len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<QI", offset, len(shape)))
            fh.write(struct.pack(f"<{len(shape)}I", *shape))
        fh.write(store.params.astype("<f4").tobytes())
        for node_index in sorted(store.norm_mean):
            mean = store.norm_mean[node_index]
            fh.write(struct.pack("<II", node_index, mean.size))
            fh.write(mean.astype("<f4").tobytes())
            fh.write(store.norm_var[node_index].astype("<f4").tobytes())


def load_params(plan: GraphPlan, path: str) -> ParamStore:
    """Rebuild a store for `plan` from a checkpoint, validating the layout."""
    store = init_params(plan, rng_seed=0)
    with open(path, "rb") as fh:
        if fh.read(8) != _CKPT_MAGIC:
            raise EngineError(f"{path}: not a parameter checkpoint")
        version, total, n_slots, n_norm = struct.unpack("<IQII", fh.read(20))
        if version != 1:
            raise EngineError(f"{path}: unsupported checkpoint version {version}")
        if total != store.params.size:
            raise EngineError(
                f"{path}: has {total} params, plan needs {store.params.size}"
            )
        for _ in range(n_slots):
            node_index, name_len = struct.unpack("<IB", fh.read(5))
            name = fh.read(name_len).decode("ascii")
            offset, ndim = struct.unpack("<QI", fh.read(12))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            have = store.slots.get((node_index, name))
            if have is None or have[0] != offset or tuple(have[1]) != shape:
                raise EngineError(f"{path}: slot mismatch at node {node_index} {name}")
        payload = fh.read(4 * total)
        store.params[:] = np.frombuffer(payload, dtype="<f4")
        for _ in range(n_norm):
            node_index, channels = struct.unpack("<II", fh.read(8))
            mean = np.frombuffer(fh.read(4 * channels), dtype="<f4").copy()
            var = np.frombuffer(fh.read(4 * channels), dtype="<f4").copy()
            if node_index not in store.norm_mean or store.norm_mean[node_index].size != channels:
                raise EngineError(f"{path}: norm stats mismatch at node {node_index}")
            store.norm_mean[node_index] = mean
            store.norm_var[node_index] = var
    return store
