"""Single-input and multi-spectral convolutional autoencoders.

Each branch encodes one representation through three stride-2 convolutions.
Branch outputs are concatenated over channels, passed through a fourth
convolution and a dense layer to the bottleneck. The decoder mirrors this:
dense, reshape, one transposed convolution, a channel split back into the
branches, then three transposed convolutions per branch ending in a sigmoid.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import dsp, nn

log = logging.getLogger(__name__)

FEATURE_COMPOSITIONS = ("both", "bottleneck", "errors")


@dataclass
class CAEConfig:
    branch_specs: list = field(default_factory=lambda: [dsp.NARROWBAND])
    channels_per_stage: list = field(default_factory=lambda: [16, 32, 64])
    post_concat_channels: int = 128
    bottleneck_dim: int = 256
    kernel: int = 3
    stride: int = 2
    padding: int = 1
    epochs: int = 100
    batch_size: int = 32
    patience: int = 10
    learning_rate: float = 1e-3
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if not 1 <= len(self.branch_specs) <= 3:
            raise ValueError(f"branch count must be 1, 2 or 3, got {len(self.branch_specs)}")
        names = [s.name for s in self.branch_specs]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate branch representations {names}")
        if len(self.channels_per_stage) != 3 or min(self.channels_per_stage) < 1:
            raise ValueError("channels_per_stage needs three positive entries")
        if self.bottleneck_dim < 1 or self.post_concat_channels < 1:
            raise ValueError("bottleneck_dim and post_concat_channels must be positive")

    @property
    def branch_names(self) -> list:
        return [s.name for s in self.branch_specs]

    def to_dict(self) -> dict:
        return dict(
            branches=self.branch_names,
            channels_per_stage=list(self.channels_per_stage),
            post_concat_channels=self.post_concat_channels,
            bottleneck_dim=self.bottleneck_dim,
            kernel=self.kernel, stride=self.stride, padding=self.padding,
            epochs=self.epochs, batch_size=self.batch_size, patience=self.patience,
            learning_rate=self.learning_rate, seed=self.seed, dtype=self.dtype,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "CAEConfig":
        d = dict(d)
        specs = [dsp.get_spec(n) for n in d.pop("branches")]
        return cls(branch_specs=specs, **d)


@dataclass
class TrainReport:
    train_loss: list
    valid_loss: list
    best_epoch: int
    final_valid_loss: float
    stopped_early: bool = False

    def __post_init__(self):
        if not self.train_loss or not self.valid_loss:
            raise ValueError("loss curves must be non-empty")
        if not 0 <= self.best_epoch < len(self.valid_loss):
            raise ValueError("best epoch out of range")


@dataclass
class FeatureVector:
    bottleneck: np.ndarray
    recon_errors: dict
    speaker_id: str = ""
    utterance_id: str = ""
    segment_index: int = 0

    def as_array(self, composition: str = "both", order=None) -> np.ndarray:
        order = order or list(self.recon_errors)
        parts = []
        if composition in ("both", "bottleneck"):
            parts.append(self.bottleneck)
        if composition in ("both", "errors"):
            parts.extend(self.recon_errors[n] for n in order)
        if not parts:
            raise ValueError(f"unknown feature composition {composition!r}")
        return np.concatenate(parts)


@dataclass
class ImageSet:
    """Aligned images for every branch, one row per segment."""

    images: dict  # representation name -> (N, rows, cols)
    speaker_ids: list
    utterance_ids: list = None
    segment_indices: list = None

    def __post_init__(self):
        n = len(self.speaker_ids)
        for name, arr in self.images.items():
            if arr.shape[0] != n:
                raise ValueError(f"{name}: {arr.shape[0]} images for {n} speaker tags")
        self.utterance_ids = list(self.utterance_ids or [""] * n)
        self.segment_indices = list(self.segment_indices or [0] * n)

    def __len__(self):
        return len(self.speaker_ids)

    def subset(self, idx) -> "ImageSet":
        idx = np.asarray(idx, dtype=int)
        return ImageSet(
            {k: v[idx] for k, v in self.images.items()},
            [self.speaker_ids[i] for i in idx],
            [self.utterance_ids[i] for i in idx],
            [self.segment_indices[i] for i in idx],
        )

    @classmethod
    def from_images(cls, per_segment: list) -> "ImageSet":
        """Build from a list of ``{name: TimeFreqImage}`` dicts."""
        if not per_segment:
            raise ValueError("no images")
        names = list(per_segment[0])
        images = {n: np.stack([seg[n].values for seg in per_segment]) for n in names}
        first = [seg[names[0]] for seg in per_segment]
        return cls(images, [im.speaker_id for im in first], [im.utterance_id for im in first],
                   [im.segment_index for im in first])


def _input_name(name):
    return f"in_{name}"


def _recon_name(name):
    return f"rec_{name}"


def build_cae(config: CAEConfig) -> nn.ModelGraph:
    rng = np.random.default_rng(config.seed)
    dtype = np.dtype(config.dtype)
    k, s, p = config.kernel, config.stride, config.padding
    chans = list(config.channels_per_stage)
    names = config.branch_names
    nodes = []
    enc_shapes = {}

    def conv(name, cin, cout, src, dst):
        nodes.append(nn.Node(name, nn.Conv2d(cin, cout, k, s, p, rng=rng, dtype=dtype), [src], [dst + "_pre"]))
        nodes.append(nn.Node(name + "_relu", nn.ReLU(), [dst + "_pre"], [dst]))

    # encoder branches; record spatial sizes for the mirrored decoder
    for name, spec in zip(names, config.branch_specs):
        h, w = spec.target_shape
        sizes = [(h, w)]
        cin, src = 1, _input_name(name)
        for i, cout in enumerate(chans):
            dst = f"enc_{name}_{i + 1}"
            conv(f"enc_{name}_conv{i + 1}", cin, cout, src, dst)
            h, w = nn.conv_output_size(h, k, s, p), nn.conv_output_size(w, k, s, p)
            if h < 1 or w < 1:
                raise ValueError(f"branch {name!r}: downsampling reaches zero size at stage {i + 1}")
            sizes.append((h, w))
            cin, src = cout, dst
        enc_shapes[name] = sizes

    tails = [f"enc_{n}_3" for n in names]
    if len({enc_shapes[n][-1] for n in names}) != 1:
        raise ValueError(f"branch feature maps differ in size: {[enc_shapes[n][-1] for n in names]}")
    if len(names) > 1:
        nodes.append(nn.Node("concat", nn.Concat(len(names)), tails, ["joint"]))
        joint = "joint"
    else:
        joint = tails[0]
    joint_ch = chans[-1] * len(names)

    h3, w3 = enc_shapes[names[0]][-1]
    h4, w4 = nn.conv_output_size(h3, k, s, p), nn.conv_output_size(w3, k, s, p)
    if h4 < 1 or w4 < 1:
        raise ValueError("downsampling reaches zero size at the fourth layer")
    conv("enc_conv4", joint_ch, config.post_concat_channels, joint, "enc_4")
    flat = config.post_concat_channels * h4 * w4
    nodes.append(nn.Node("flatten", nn.Flatten(), ["enc_4"], ["enc_flat"]))
    nodes.append(nn.Node("fc_enc", nn.Dense(flat, config.bottleneck_dim, rng=rng, dtype=dtype), ["enc_flat"], ["bottleneck"]))

    # decoder
    nodes.append(nn.Node("fc_dec", nn.Dense(config.bottleneck_dim, flat, rng=rng, dtype=dtype), ["bottleneck"], ["dec_flat"]))
    nodes.append(nn.Node("reshape", nn.Reshape((config.post_concat_channels, h4, w4)), ["dec_flat"], ["dec_4"]))

    def deconv(name, cin, cout, src, dst, in_hw, out_hw, act):
        op = tuple(o - ((i - 1) * s - 2 * p + k) for i, o in zip(in_hw, out_hw))
        layer = nn.ConvTranspose2d(cin, cout, k, s, p, output_padding=op, rng=rng, dtype=dtype)
        nodes.append(nn.Node(name, layer, [src], [dst + "_pre"]))
        nodes.append(nn.Node(name + "_" + act.kind.lower(), act, [dst + "_pre"], [dst]))

    deconv("dec_deconv4", config.post_concat_channels, joint_ch, "dec_4", "dec_joint",
           (h4, w4), (h3, w3), nn.ReLU())
    if len(names) > 1:
        nodes.append(nn.Node("split", nn.Split([chans[-1]] * len(names)), ["dec_joint"],
                             [f"dec_{n}_3" for n in names]))
        heads = [f"dec_{n}_3" for n in names]
    else:
        heads = ["dec_joint"]

    for name, head in zip(names, heads):
        sizes = enc_shapes[name]
        src = head
        plan = [(chans[2], chans[1]), (chans[1], chans[0]), (chans[0], 1)]
        for stage, (cin, cout) in zip((3, 2, 1), plan):
            last = stage == 1
            dst = _recon_name(name) if last else f"dec_{name}_{stage - 1}"
            deconv(f"dec_{name}_deconv{stage}", cin, cout, src, dst,
                   sizes[stage], sizes[stage - 1], nn.Sigmoid() if last else nn.ReLU())
            src = dst

    graph = nn.ModelGraph(
        nodes,
        inputs=[_input_name(n) for n in names],
        outputs=[_recon_name(n) for n in names],
        bottleneck_name="bottleneck",
        input_shapes={_input_name(n): (1, 1) + tuple(sp.target_shape) for n, sp in zip(names, config.branch_specs)},
    )
    shapes = graph.infer_shapes(graph.input_shapes)
    for n in names:
        if shapes[_recon_name(n)] != shapes[_input_name(n)]:
            raise nn.ShapeError(f"reconstruction of {n} has shape {shapes[_recon_name(n)]}")
    return graph


def _batch_inputs(images: ImageSet, names, idx, dtype):
    return {_input_name(n): images.images[n][idx][:, None].astype(dtype, copy=False) for n in names}


def _loss_and_grads(graph, out, inputs, names):
    total, grads = 0.0, {}
    for n in names:
        loss, g = nn.mse_loss(out[_recon_name(n)], inputs[_input_name(n)])
        total += loss
        grads[_recon_name(n)] = g
    return total, grads


def reconstruction_loss(graph: nn.ModelGraph, images: ImageSet, config: CAEConfig) -> float:
    """Mean over segments of the summed per-branch MSE."""
    names = config.branch_names
    total = 0.0
    for start in range(0, len(images), config.batch_size):
        idx = np.arange(start, min(start + config.batch_size, len(images)))
        inputs = _batch_inputs(images, names, idx, config.dtype)
        out = graph.forward(inputs)
        for n in names:
            d = (out[_recon_name(n)] - inputs[_input_name(n)]).astype(np.float64)
            total += float(np.sum(np.mean(d * d, axis=(1, 2, 3))))
    return total / len(images)


def train_autoencoder(graph: nn.ModelGraph, train_images: ImageSet, valid_images: ImageSet,
                      config: CAEConfig, progress=None) -> TrainReport:
    """Adam on the summed per-branch MSE with early stopping on validation loss.

    Parameters from the best validation epoch are restored on return. Epoch 0
    in the returned curves is the untrained model.
    """
    if len(train_images) == 0 or len(valid_images) == 0:
        raise ValueError("training and validation sets must be non-empty")
    overlap = set(train_images.speaker_ids) & set(valid_images.speaker_ids)
    if overlap:
        raise ValueError(f"speakers in both training and validation sets: {sorted(overlap)[:5]}")
    names = config.branch_names
    for part in (train_images, valid_images):
        missing = [n for n in names if n not in part.images]
        if missing:
            raise ValueError(f"image set lacks representations {missing}")

    rng = np.random.default_rng(config.seed + 1)
    state = nn.AdamState(learning_rate=config.learning_rate)
    with graph.lock:
        train_curve = [reconstruction_loss(graph, train_images, config)]
        valid_curve = [reconstruction_loss(graph, valid_images, config)]
        best, best_epoch, best_params = valid_curve[0], 0, graph.copy_parameters()
        stale, stopped = 0, False
        params = graph.parameters()
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(train_images))
            batch_losses, weights = [], []
            for start in range(0, len(order), config.batch_size):
                idx = order[start : start + config.batch_size]
                inputs = _batch_inputs(train_images, names, idx, config.dtype)
                out = graph.forward(inputs, train=True)
                loss, grads = _loss_and_grads(graph, out, inputs, names)
                graph.backward(grads)
                nn.adam_step(state, params, graph.gradients())
                batch_losses.append(loss)
                weights.append(len(idx))
            train_curve.append(float(np.average(batch_losses, weights=weights)))
            valid_curve.append(reconstruction_loss(graph, valid_images, config))
            if progress:
                progress(epoch, train_curve[-1], valid_curve[-1])
            log.debug("epoch %d train %.5f valid %.5f", epoch, train_curve[-1], valid_curve[-1])
            if valid_curve[-1] < best:
                best, best_epoch, best_params = valid_curve[-1], epoch, graph.copy_parameters()
                stale = 0
            else:
                stale += 1
                if stale > config.patience:
                    stopped = True
                    break
        graph.set_parameters(best_params)
    return TrainReport(train_curve, valid_curve, best_epoch, best, stopped)


def band_groups(n_rows: int, n_bands: int) -> list:
    """Row index groups mapping image rows back onto the representation's bands."""
    return np.array_split(np.arange(n_rows), n_bands)


def _band_errors(err_map: np.ndarray, spec) -> np.ndarray:
    # err_map: (N, rows, cols) squared error -> (N, n_bands)
    per_row = err_map.mean(axis=2)
    return np.stack([per_row[:, g].mean(axis=1) for g in band_groups(err_map.shape[1], spec.n_bands)], axis=1)


def extract_batch(graph: nn.ModelGraph, images: ImageSet, config: CAEConfig, batch_size=None):
    """Bottlenecks (N, bottleneck_dim) and per-branch band errors {name: (N, n_bands)}."""
    names = config.branch_names
    bs = batch_size or config.batch_size
    bottlenecks, errors = [], {n: [] for n in names}
    for start in range(0, len(images), bs):
        idx = np.arange(start, min(start + bs, len(images)))
        inputs = _batch_inputs(images, names, idx, config.dtype)
        out = graph.forward(inputs)
        bottlenecks.append(out["bottleneck"].astype(np.float64))
        for n, spec in zip(names, config.branch_specs):
            d = (out[_recon_name(n)][:, 0] - inputs[_input_name(n)][:, 0]).astype(np.float64)
            errors[n].append(_band_errors(d * d, spec))
    return np.concatenate(bottlenecks), {n: np.concatenate(v) for n, v in errors.items()}


def extract_features(graph: nn.ModelGraph, images: dict, config: CAEConfig,
                     speaker_id="", utterance_id="", segment_index=0) -> FeatureVector:
    """Feature vector for one segment given one image per branch."""
    arrays = {}
    for n, spec in zip(config.branch_names, config.branch_specs):
        if n not in images:
            raise ValueError(f"missing image for branch {n!r}")
        v = images[n].values if isinstance(images[n], dsp.TimeFreqImage) else np.asarray(images[n])
        if v.shape != tuple(spec.target_shape):
            raise nn.ShapeError(f"branch {n!r}: image shape {v.shape} != {tuple(spec.target_shape)}")
        arrays[n] = v[None]
    bn, errs = extract_batch(graph, ImageSet(arrays, [speaker_id]), config)
    return FeatureVector(bn[0], {n: e[0] for n, e in errs.items()}, speaker_id, utterance_id, segment_index)


def feature_matrix(graph: nn.ModelGraph, images: ImageSet, config: CAEConfig,
                   composition: str = "both") -> np.ndarray:
    """Stacked feature vectors in branch order, shape (N, D)."""
    if composition not in FEATURE_COMPOSITIONS:
        raise ValueError(f"unknown feature composition {composition!r}")
    bn, errs = extract_batch(graph, images, config)
    parts = []
    if composition in ("both", "bottleneck"):
        parts.append(bn)
    if composition in ("both", "errors"):
        parts.extend(errs[n] for n in config.branch_names)
    return np.concatenate(parts, axis=1)


def feature_dim(config: CAEConfig, composition: str = "both") -> int:
    d = 0
    if composition in ("both", "bottleneck"):
        d += config.bottleneck_dim
    if composition in ("both", "errors"):
        d += sum(s.n_bands for s in config.branch_specs)
    return d
