"""Conditional RealNVP with a mollified-uniform latent distribution.

The generative direction stacks affine coupling layers: each layer passes a
subset of dimensions through unchanged and maps the rest as
(z_trans - t(z_pass, y)) * exp(-k(z_pass, y)), so the map is invertible by
construction and its Jacobian is block triangular with determinant
exp(-sum k). The normalizing direction therefore accumulates +sum k per layer
as the change-of-variables log-determinant, and maximum likelihood needs only
that sum plus the latent log-density.

An optional fixed output stage x = R (u * scale) + shift (R orthogonal) maps
the coupling stack's output onto the dataset's frame; it is not trained and
its (constant) log-determinant is included in the accumulated sum. Whitening
the data this way matters for equality-constrained integer sets, whose support
is a thin slab along a diagonal direction no axis-aligned coupling squeeze can
reach cheaply.
"""

from __future__ import annotations

import numpy as np
from scipy import special as _special

from .autodiff import (
    AdamState,
    DivergenceError,
    Mlp,
    Tensor,
    as_generator,
    concat,
    load_arrays,
    save_arrays,
    zero_grads,
)

# Scale-net outputs are clamped before exponentiation; unbounded k can
# overflow exp() early in training. The clamp zeroes gradients past +-8.
K_CLAMP = 8.0


class MollifiedUniform:
    """Uniform on [-1,1] per dimension, convolved with N(0, sigma^2) noise.

    Per-dimension density (as used for training): p(u) = Phi((1-u)/sigma)
    - Phi((-1-u)/sigma), i.e. the box-indicator smoothed by the Gaussian
    kernel, without the 1/2 box normalizer.
    """

    def __init__(self, dim, sigma=0.01):
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.dim = int(dim)
        self.sigma = float(sigma)

    def _log_density_1d(self, v):
        # v = |u|; by symmetry p(u) = p(|u|), and with v >= 0 the lower CDF
        # term is deep in the left tail, where log-space evaluation is exact.
        b = (1.0 - v) / self.sigma
        a = (-1.0 - v) / self.sigma
        lb = _special.log_ndtr(b)
        la = _special.log_ndtr(a)
        return lb + np.log1p(-np.exp(la - lb))

    def log_density(self, z):
        """Sum of per-dimension log-densities; (n,) for batched input."""
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        if single:
            z = z[None, :]
        if z.shape[1] != self.dim:
            raise ValueError(f"expected dimension {self.dim}, got {z.shape[1]}")
        total = self._log_density_1d(np.abs(z)).sum(axis=1)
        return float(total[0]) if single else total

    def log_density_t(self, z):
        """Tape version of log_density for training; z is a (n, dim) Tensor."""
        inv = 1.0 / self.sigma
        v = z.abs()
        lb = ((1.0 - v) * inv).log_ndtr()
        la = ((-1.0 - v) * inv).log_ndtr()
        ratio = (la - lb).exp()
        return (lb + (1.0 - ratio).log()).sum(axis=1)


class CouplingLayer:
    """One affine coupling step with explicit pass-through / transformed splits."""

    def __init__(self, pass_idx, trans_idx, cond_dim, hidden, rng):
        self.pass_idx = np.asarray(pass_idx, dtype=np.intp)
        self.trans_idx = np.asarray(trans_idx, dtype=np.intp)
        self.cond_dim = int(cond_dim)
        in_dim = self.pass_idx.size + self.cond_dim
        out_dim = self.trans_idx.size
        dims = [in_dim, *hidden, out_dim]
        self.scale_net = Mlp(dims, hidden_activation="relu", rng=rng,
                             zero_output_layer=True)
        self.shift_net = Mlp(dims, hidden_activation="relu", rng=rng,
                             zero_output_layer=True)
        # Natural-order permutation for reassembling [pass, trans] columns.
        order = np.concatenate([self.pass_idx, self.trans_idx])
        self.unperm = np.argsort(order)

    def _nets_np(self, zp, y):
        h = np.concatenate([zp, y], axis=1) if self.cond_dim else zp
        k = np.clip(self.scale_net.forward_np(h), -K_CLAMP, K_CLAMP)
        t = self.shift_net.forward_np(h)
        return k, t

    def generate_np(self, z, y):
        zp = z[:, self.pass_idx]
        k, t = self._nets_np(zp, y)
        x = z.copy()
        x[:, self.trans_idx] = (z[:, self.trans_idx] - t) * np.exp(-k)
        return x

    def invert_np(self, x, y):
        xp = x[:, self.pass_idx]
        k, t = self._nets_np(xp, y)
        z = x.copy()
        z[:, self.trans_idx] = x[:, self.trans_idx] * np.exp(k) + t
        return z, k.sum(axis=1)

    def _nets_t(self, zp, y_t):
        h = concat([zp, y_t], axis=1) if self.cond_dim else zp
        k = self.scale_net(h).clip(-K_CLAMP, K_CLAMP)
        t = self.shift_net(h)
        return k, t

    def generate_t(self, z, y_t):
        zp = z.take_cols(self.pass_idx)
        k, t = self._nets_t(zp, y_t)
        xt = (z.take_cols(self.trans_idx) - t) * (-1.0 * k).exp()
        return concat([zp, xt], axis=1).take_cols(self.unperm)

    def invert_t(self, x, y_t):
        xp = x.take_cols(self.pass_idx)
        k, t = self._nets_t(xp, y_t)
        zt = x.take_cols(self.trans_idx) * k.exp() + t
        z = concat([xp, zt], axis=1).take_cols(self.unperm)
        return z, k.sum(axis=1)

    def jacobian_np(self, z, y):
        """Batched (n, D, D) Jacobian of generate_np at z (natural dim order)."""
        n, dim = z.shape
        zp = z[:, self.pass_idx]
        h = np.concatenate([zp, y], axis=1) if self.cond_dim else zp
        k_raw = self.scale_net.forward_np(h)
        k = np.clip(k_raw, -K_CLAMP, K_CLAMP)
        t = self.shift_net.forward_np(h)
        # Input-Jacobians of the nets, restricted to the pass-through columns;
        # rows where the clamp is active have zero scale sensitivity.
        d_pass = self.pass_idx.size
        jk = self.scale_net.input_jacobian_np(h)[:, :, :d_pass]
        jk = jk * (np.abs(k_raw) <= K_CLAMP)[:, :, None]
        jt = self.shift_net.input_jacobian_np(h)[:, :, :d_pass]
        exp_neg_k = np.exp(-k)
        resid = z[:, self.trans_idx] - t
        coupling = -exp_neg_k[:, :, None] * (resid[:, :, None] * jk + jt)
        jac = np.zeros((n, dim, dim))
        jac[:, self.pass_idx, self.pass_idx] = 1.0
        jac[:, self.trans_idx[:, None], self.pass_idx[None, :]] = coupling
        jac[:, self.trans_idx, self.trans_idx] = exp_neg_k
        return jac


def alternating_schedule(dim, n_layers):
    """Pass-through index sets: first ceil(D/2) dims, swapped every layer."""
    if dim < 2:
        raise ValueError("coupling flows need at least 2 dimensions")
    d = (dim + 1) // 2
    front = np.arange(d)
    back = np.arange(d, dim)
    schedule = []
    for i in range(n_layers):
        schedule.append((front, back) if i % 2 == 0 else (back, front))
    return schedule


class FlowModel:
    """Stack of conditional coupling layers plus the mollified-uniform latent."""

    def __init__(self, dim, cond_dim=0, n_layers=6, hidden=(256, 256), sigma=0.01,
                 seed=0, output_scale=None, output_shift=None, output_rotation=None,
                 schedule=None):
        self.dim = int(dim)
        self.cond_dim = int(cond_dim)
        self.n_layers = int(n_layers)
        self.hidden = tuple(int(h) for h in hidden)
        rng = as_generator(seed)
        if schedule is None:
            schedule = alternating_schedule(self.dim, self.n_layers)
        if len(schedule) != self.n_layers:
            raise ValueError("schedule length must equal n_layers")
        if self.n_layers >= 2:
            # Single-layer stacks are allowed for diagnostics; a real model
            # must touch every dimension.
            covered = np.zeros(self.dim, dtype=bool)
            for _, trans in schedule:
                covered[np.asarray(trans, dtype=np.intp)] = True
            if not covered.all():
                raise ValueError("every dimension must be transformed by some layer")
        self.layers = [CouplingLayer(p, t, self.cond_dim, self.hidden, rng)
                       for p, t in schedule]
        self.prior = MollifiedUniform(self.dim, sigma)
        self.output_scale = (np.ones(self.dim) if output_scale is None
                             else np.asarray(output_scale, dtype=np.float64).copy())
        self.output_shift = (np.zeros(self.dim) if output_shift is None
                             else np.asarray(output_shift, dtype=np.float64).copy())
        if np.any(self.output_scale == 0):
            raise ValueError("output_scale must be nonzero")
        if output_rotation is None:
            self.output_rotation = None
        else:
            rot = np.asarray(output_rotation, dtype=np.float64).copy()
            if rot.shape != (self.dim, self.dim):
                raise ValueError("output_rotation must be (dim, dim)")
            if np.max(np.abs(rot @ rot.T - np.eye(self.dim))) > 1e-10:
                raise ValueError("output_rotation must be orthogonal")
            self.output_rotation = rot
        self._affine_logdet = float(np.sum(np.log(np.abs(self.output_scale))))
        self._has_affine = bool(np.any(self.output_scale != 1.0)
                                or np.any(self.output_shift != 0.0)
                                or self.output_rotation is not None)

    # -- shape plumbing ---------------------------------------------------------

    def _as_batch(self, arr, width, name):
        arr = np.asarray(arr, dtype=np.float64)
        single = arr.ndim == 1
        if single:
            arr = arr[None, :]
        if arr.shape[1] != width:
            raise ValueError(f"{name} has width {arr.shape[1]}, expected {width}")
        return arr, single

    def _cond_batch(self, y, n):
        if self.cond_dim == 0:
            return np.zeros((n, 0))
        if y is None:
            raise ValueError("conditioning vector required")
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1:
            y = np.tile(y, (n, 1))
        if y.shape != (n, self.cond_dim):
            raise ValueError(f"conditioning batch must be ({n}, {self.cond_dim})")
        return y

    def parameters(self):
        params = []
        for layer in self.layers:
            params.extend(layer.scale_net.parameters())
            params.extend(layer.shift_net.parameters())
        return params

    def parameter_checksum(self):
        return float(sum(np.sum(p.data) for p in self.parameters()))

    # -- maps ---------------------------------------------------------------------

    def backward_map(self, z0, y=None):
        """Latent point(s) -> action(s): apply the coupling stack then the affine."""
        z, single = self._as_batch(z0, self.dim, "latent")
        yb = self._cond_batch(y, z.shape[0])
        x = z
        for layer in self.layers:
            x = layer.generate_np(x, yb)
        x = x * self.output_scale
        if self.output_rotation is not None:
            x = x @ self.output_rotation.T
        x = x + self.output_shift
        if not np.all(np.isfinite(x)):
            raise DivergenceError("non-finite value in backward map (scale blow-up)")
        return x[0] if single else x

    def forward_map_logdet(self, x, y=None):
        """Action(s) -> (latent, log|det d latent / d action|).

        The returned log-determinant is the normalizing-direction one
        (+sum k per layer), so log p(x) = prior.log_density(z) + logdet.
        """
        xb, single = self._as_batch(x, self.dim, "action")
        yb = self._cond_batch(y, xb.shape[0])
        u = xb - self.output_shift
        if self.output_rotation is not None:
            u = u @ self.output_rotation
        u = u / self.output_scale
        logdet = np.full(xb.shape[0], -self._affine_logdet)
        for layer in reversed(self.layers):
            u, ksum = layer.invert_np(u, yb)
            logdet += ksum
        if not np.all(np.isfinite(u)):
            raise DivergenceError("non-finite value in forward map (scale blow-up)")
        if single:
            return u[0], float(logdet[0])
        return u, logdet

    def log_prob(self, x, y=None):
        z, logdet = self.forward_map_logdet(x, y)
        return self.prior.log_density(z) + logdet

    def backward_map_t(self, z_t, y_t=None):
        """Tape version of backward_map for end-to-end autodiff."""
        x = z_t
        for layer in self.layers:
            x = layer.generate_t(x, y_t)
        if self._has_affine:
            x = x * self.output_scale
            if self.output_rotation is not None:
                x = x @ Tensor(self.output_rotation.T)
            x = x + Tensor(self.output_shift)
        return x

    def _forward_logdet_t(self, x_t, y_t):
        u = x_t
        if self._has_affine:
            u = u - Tensor(self.output_shift)
            if self.output_rotation is not None:
                u = u @ Tensor(self.output_rotation)
            u = u * (1.0 / self.output_scale)
        logdet = None
        for layer in reversed(self.layers):
            u, ksum = layer.invert_t(u, y_t)
            logdet = ksum if logdet is None else logdet + ksum
        if self._affine_logdet != 0.0:
            logdet = logdet + (-self._affine_logdet)
        return u, logdet

    def input_gradient(self, z0, y=None):
        """Analytic d action / d latent as ordered products of per-layer blocks.

        Batched input gives (n, D, D); a single latent gives (D, D). This path
        shares no code with the tape: net Jacobians come from explicit
        layer-by-layer products.
        """
        z, single = self._as_batch(z0, self.dim, "latent")
        yb = self._cond_batch(y, z.shape[0])
        n = z.shape[0]
        jac = np.broadcast_to(np.eye(self.dim), (n, self.dim, self.dim)).copy()
        x = z
        for layer in self.layers:
            jac = np.matmul(layer.jacobian_np(x, yb), jac)
            x = layer.generate_np(x, yb)
        jac = jac * self.output_scale[None, :, None]
        if self.output_rotation is not None:
            jac = np.matmul(self.output_rotation, jac)
        return jac[0] if single else jac

    # -- training -------------------------------------------------------------------

    def train(self, dataset, epochs, batch_size=5000, lr=1e-5, seed=0,
              dequantize=False, log_every=None):
        """Maximum-likelihood training; returns the per-epoch mean NLL list.

        dequantize adds fresh uniform noise to each batch (integer-valued
        datasets only): True means amplitude 0.5 (full cells); a float in
        (0, 0.5] trains on shrunken sub-cells, which bounds the likelihood
        away from point-mass collapse while leaving the remaining rounding
        margin free for the fitted map's spill. The noise comes from the same
        seeded stream as the shuffling so runs are reproducible.
        """
        if epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if len(dataset) == 0:
            raise ValueError("dataset is empty")
        if dataset.action_dim != self.dim:
            raise ValueError("dataset action dimension does not match the flow")
        if self.cond_dim and dataset.cond_dim != self.cond_dim:
            raise ValueError("dataset conditioning dimension does not match the flow")
        amplitude = 0.0
        if dequantize:
            amplitude = 0.5 if dequantize is True else float(dequantize)
            if not 0.0 < amplitude <= 0.5:
                raise ValueError("dequantization amplitude must be in (0, 0.5]")
        rng = as_generator(seed)
        params = self.parameters()
        opt = AdamState(params, lr=lr)
        history = []
        n = len(dataset)
        for epoch in range(epochs):
            order = rng.permutation(n)
            losses = []
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                xb = dataset.x[idx]
                if amplitude:
                    xb = xb + rng.uniform(-amplitude, amplitude, size=xb.shape)
                x_t = Tensor(xb)
                y_t = Tensor(dataset.y[idx]) if self.cond_dim else None
                z_t, logdet_t = self._forward_logdet_t(x_t, y_t)
                logp = self.prior.log_density_t(z_t) + logdet_t
                loss = -1.0 * logp.mean()
                if not np.isfinite(loss.data):
                    raise DivergenceError(
                        f"non-finite NLL at epoch {epoch}, batch start {start}")
                zero_grads(params)
                loss.backward()
                opt.step(params)
                losses.append(float(loss.data))
            history.append(float(np.mean(losses)))
            if log_every and (epoch + 1) % log_every == 0:
                print(f"epoch {epoch + 1}/{epochs}: nll={history[-1]:.4f}")
        return history

    # -- evaluation -------------------------------------------------------------------

    def accuracy(self, cs, y=None, n_samples=100000, seed=0, batch=20000):
        """Fraction of uniform-latent draws whose mapped action is feasible.

        Latents are crisp uniform on [-1,1]^D. Integer constraint sets test the
        decoded action (a continuous output never satisfies exact integrality;
        the constraint supplies its lattice decoder).
        """
        rng = as_generator(seed)
        hits = 0
        done = 0
        while done < n_samples:
            block = min(batch, n_samples - done)
            z = rng.uniform(-1.0, 1.0, size=(block, self.dim))
            x = self.backward_map(z, y)
            hits += int(np.count_nonzero(cs.is_feasible(cs.decode_action(x))))
            done += block
        return hits / n_samples

    def recall(self, cs, y, reference, batch=20000):
        """Fraction of reference feasible actions whose latent lies in [-1,1]^D."""
        if reference.action_dim != self.dim:
            raise ValueError("reference action dimension does not match the flow")
        if cs is not None and cs.dim != self.dim:
            raise ValueError("constraint dimension does not match the flow")
        inside = 0
        n = len(reference)
        for start in range(0, n, batch):
            xb = reference.x[start:start + batch]
            yb = reference.y[start:start + batch] if self.cond_dim else y
            z, _ = self.forward_map_logdet(xb, yb)
            inside += int(np.count_nonzero(np.max(np.abs(z), axis=1) <= 1.0))
        return inside / n

    def invalid_projection_distances(self, cs, y=None, n_samples=100000, seed=0,
                                     batch=20000):
        """L2 distance from each infeasible mapped action to its projection."""
        rng = as_generator(seed)
        dists = []
        done = 0
        while done < n_samples:
            block = min(batch, n_samples - done)
            z = rng.uniform(-1.0, 1.0, size=(block, self.dim))
            x = self.backward_map(z, y)
            bad = ~cs.is_feasible(cs.decode_action(x))
            if np.any(bad):
                projected = cs.project(x[bad])
                dists.append(np.linalg.norm(x[bad] - projected, axis=1))
            done += block
        return np.concatenate(dists) if dists else np.zeros(0)


def whitening_transform(x, margin=1.02, pad=0.0):
    """Data-driven output frame: (rotation, scale, shift) from PCA axes.

    shift is the data mean; rotation columns are covariance eigenvectors
    (deterministic sign convention); scale is each rotated axis's half-extent
    times `margin`, plus `pad` in raw units (use pad=0.5*sqrt(D) worst case to
    cover dequantization noise, or simply pass the dequantized data). The
    lowest-variance axis of an equality-constrained set is its normal
    direction, so the thin slab lands axis-aligned in the whitened frame.
    """
    x = np.asarray(x, dtype=np.float64)
    shift = x.mean(axis=0)
    cov = np.cov(x - shift, rowvar=False)
    _, vecs = np.linalg.eigh(np.atleast_2d(cov))
    # Fix each eigenvector's sign by its largest-magnitude entry.
    for j in range(vecs.shape[1]):
        k = np.argmax(np.abs(vecs[:, j]))
        if vecs[k, j] < 0:
            vecs[:, j] = -vecs[:, j]
    rotated = (x - shift) @ vecs
    scale = np.max(np.abs(rotated), axis=0) * margin + pad
    scale = np.maximum(scale, 1e-9)
    return vecs, scale, shift


# -- checkpoints ----------------------------------------------------------------------

def save_flow(path, flow):
    manifest = {
        "kind": "flow",
        "dim": flow.dim,
        "cond_dim": flow.cond_dim,
        "n_layers": flow.n_layers,
        "hidden": list(flow.hidden),
        "sigma": flow.prior.sigma,
        "schedule": [[layer.pass_idx.tolist(), layer.trans_idx.tolist()]
                     for layer in flow.layers],
    }
    arrays = {"output_scale": flow.output_scale, "output_shift": flow.output_shift}
    if flow.output_rotation is not None:
        arrays["output_rotation"] = flow.output_rotation
    for i, layer in enumerate(flow.layers):
        for tag, net in (("k", layer.scale_net), ("t", layer.shift_net)):
            for name, arr in net.state_arrays().items():
                arrays[f"layer{i}.{tag}.{name}"] = arr
    save_arrays(path, manifest, arrays)


def load_flow(path):
    manifest, arrays = load_arrays(path)
    if manifest.get("kind") != "flow":
        raise ValueError("not a flow checkpoint")
    schedule = [(np.asarray(p, dtype=np.intp), np.asarray(t, dtype=np.intp))
                for p, t in manifest["schedule"]]
    flow = FlowModel(manifest["dim"], cond_dim=manifest["cond_dim"],
                     n_layers=manifest["n_layers"], hidden=manifest["hidden"],
                     sigma=manifest["sigma"], seed=0,
                     output_scale=arrays["output_scale"],
                     output_shift=arrays["output_shift"],
                     output_rotation=arrays.get("output_rotation"),
                     schedule=schedule)
    for i, layer in enumerate(flow.layers):
        for tag, net in (("k", layer.scale_net), ("t", layer.shift_net)):
            prefix = f"layer{i}.{tag}."
            net.load_state_arrays({name[len(prefix):]: arr for name, arr in arrays.items()
                                   if name.startswith(prefix)})
    return flow
