"""Small fully-convolutional heatmap predictor with a hand-written backward pass."""

from __future__ import annotations

import numpy as np

from .gauss import InvalidParameterError


def _im2col3(x):
    """(C, H, W) -> (H*W, C*9) patch matrix for a 3x3 same-padded convolution."""
    c, h, w = x.shape
    padded = np.zeros((c, h + 2, w + 2), dtype=x.dtype)
    padded[:, 1:-1, 1:-1] = x
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    return win.transpose(1, 2, 0, 3, 4).reshape(h * w, c * 9)


def _col2im3(dcol, shape):
    """Adjoint of _im2col3: scatter patch gradients back onto the (C, H, W) image."""
    c, h, w = shape
    dpad = np.zeros((c, h + 2, w + 2), dtype=dcol.dtype)
    d = dcol.reshape(h, w, c, 3, 3)
    for ki in range(3):
        for kj in range(3):
            dpad[:, ki:ki + h, kj:kj + w] += d[:, :, :, ki, kj].transpose(2, 0, 1)
    return dpad[:, 1:-1, 1:-1]


def avgpool2(x):
    c, h, w = x.shape
    return x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def avgpool2_backward(dy):
    return np.repeat(np.repeat(dy, 2, axis=1), 2, axis=2) * 0.25


def upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upsample2_backward(dy):
    c, h, w = dy.shape
    return dy.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4))


class ReferencePredictor:
    """Fixed image-to-heatmaps network: three 3x3 conv+ReLU stages with two 2x2
    average-poolings on the way down, two nearest-neighbour upsamplings with
    conv+ReLU on the way back, one (inverted) dropout layer in front of the
    final stage, and a linear 1x1 head with one output channel per landmark.

    All arithmetic is float64.  Gradients come from the explicit backward pass
    below; the finite-difference checks in the test suite are the contract.
    """

    def __init__(self, landmark_count: int, width: int = 16, seed: int = 0):
        if landmark_count < 1 or width < 1:
            raise InvalidParameterError("landmark_count and width must be >= 1")
        self.landmark_count = int(landmark_count)
        self.width = int(width)
        rng = np.random.default_rng(seed)
        c, n = self.width, self.landmark_count
        self.weights = []
        self.biases = []
        for cin in (1, c, c, c, c):
            fan_in = cin * 9
            self.weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c, cin, 3, 3)))
            self.biases.append(np.zeros(c))
        # zero head: initial output is exactly 0, so the first gradient step
        # already points each landmark channel at its feature-target correlation
        self.weights.append(np.zeros((n, c)))
        self.biases.append(np.zeros(n))
        self._cache = None

    # --- parameter vector ---------------------------------------------------

    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def get_params(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.num_params(),):
            raise InvalidParameterError(
                f"expected {self.num_params()} parameters, got {flat.shape}")
        pos = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = flat[pos:pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.biases[i] = flat[pos:pos + b.size].copy()
            pos += b.size

    # --- forward / backward ---------------------------------------------------

    def _conv(self, x, layer, cache):
        w, b = self.weights[layer], self.biases[layer]
        col = _im2col3(x)
        y = col @ w.reshape(w.shape[0], -1).T + b
        h, wd = x.shape[1], x.shape[2]
        cache.append((col, x.shape))
        return y.T.reshape(w.shape[0], h, wd)

    def forward(self, image: np.ndarray, dropout_rate: float = 0.0,
                rng: np.random.Generator | None = None) -> np.ndarray:
        """Run the network on a (H, W) image; returns (N, H, W) heatmaps.

        H and W must be divisible by 4 (two pooling stages).  A nonzero
        dropout_rate needs an rng and rescales kept activations by 1/(1-rate)
        so the expected activation is unchanged.
        """
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 2 or image.shape[0] % 4 or image.shape[1] % 4:
            raise InvalidParameterError(
                f"image must be 2-D with sides divisible by 4, got {image.shape}")
        if dropout_rate and rng is None:
            raise InvalidParameterError("dropout_rate > 0 requires an rng")
        cols = []
        x = image[None]
        a1 = np.maximum(self._conv(x, 0, cols), 0.0)
        p1 = avgpool2(a1)
        a2 = np.maximum(self._conv(p1, 1, cols), 0.0)
        p2 = avgpool2(a2)
        a3 = np.maximum(self._conv(p2, 2, cols), 0.0)
        u1 = upsample2(a3)
        a4 = np.maximum(self._conv(u1, 3, cols), 0.0)
        u2 = upsample2(a4)
        if dropout_rate:
            mask = (rng.random(u2.shape) >= dropout_rate) / (1.0 - dropout_rate)
        else:
            mask = None
        d = u2 * mask if mask is not None else u2
        a5 = np.maximum(self._conv(d, 4, cols), 0.0)
        wh, bh = self.weights[5], self.biases[5]
        y = np.einsum("nc,chw->nhw", wh, a5) + bh[:, None, None]
        self._cache = (cols, (a1, a2, a3, a4, a5), mask)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        """Backpropagate (N, H, W) output gradients from the latest forward call.

        Returns the loss gradient with respect to the flat parameter vector.
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        cols, (a1, a2, a3, a4, a5), mask = self._cache
        gw = [None] * 6
        gb = [None] * 6
        wh = self.weights[5]
        gw[5] = np.einsum("nhw,chw->nc", dy, a5)
        gb[5] = dy.sum(axis=(1, 2))
        da5 = np.einsum("nc,nhw->chw", wh, dy)

        def conv_back(dyc, act, layer):
            dyc = dyc * (act > 0.0)
            col, in_shape = cols[layer]
            w = self.weights[layer]
            dym = dyc.reshape(dyc.shape[0], -1).T
            gw[layer] = (dym.T @ col).reshape(w.shape)
            gb[layer] = dym.sum(axis=0)
            return _col2im3(dym @ w.reshape(w.shape[0], -1), in_shape)

        dd = conv_back(da5, a5, 4)
        du2 = dd * mask if mask is not None else dd
        da4 = upsample2_backward(du2)
        du1 = conv_back(da4, a4, 3)
        da3 = upsample2_backward(du1)
        dp2 = conv_back(da3, a3, 2)
        da2 = avgpool2_backward(dp2)
        dp1 = conv_back(da2, a2, 1)
        da1 = avgpool2_backward(dp1)
        conv_back(da1, a1, 0)
        parts = []
        for w, b in zip(gw, gb):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)
