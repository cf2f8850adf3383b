"""Random small graphs and a central-difference gradient check."""
import numpy as np

from msfusion import nn


def random_graph(seed):
    """A random double-precision graph with at most four parameterised layers."""
    rng = np.random.default_rng(seed)
    f64 = np.float64
    kind = seed % 4
    act = lambda: nn.Sigmoid() if rng.random() < 0.5 else nn.ReLU()
    if kind == 0:  # conv -> conv
        c1 = int(rng.integers(1, 4))
        layers = [nn.Conv2d(1, c1, 3, int(rng.integers(1, 3)), 1, rng=rng, dtype=f64), act(),
                  nn.Conv2d(c1, 2, 3, 1, 1, rng=rng, dtype=f64)]
        shapes = {"x": (2, 1, 7, 6)}
        graph = nn.sequential(layers, "x", shapes["x"])
    elif kind == 1:  # conv -> transposed conv
        layers = [nn.Conv2d(1, 3, 3, 2, 1, rng=rng, dtype=f64), act(),
                  nn.ConvTranspose2d(3, 1, 3, 2, 1, output_padding=(1, 0), rng=rng, dtype=f64), nn.Sigmoid()]
        shapes = {"x": (2, 1, 8, 7)}
        graph = nn.sequential(layers, "x", shapes["x"])
    elif kind == 2:  # dense stack with reshape
        d = int(rng.integers(3, 8))
        layers = [nn.Flatten(), nn.Dense(12, d, rng=rng, dtype=f64), act(),
                  nn.Dense(d, 6, rng=rng, dtype=f64), nn.Reshape((1, 2, 3))]
        shapes = {"x": (3, 1, 3, 4)}
        graph = nn.sequential(layers, "x", shapes["x"])
    else:  # two branches joined by concat, split again
        nodes = [
            nn.Node("a", nn.Conv2d(1, 2, 3, 1, 1, rng=rng, dtype=f64), ["xa"], ["ha"]),
            nn.Node("b", nn.Conv2d(1, 2, 3, 1, 1, rng=rng, dtype=f64), ["xb"], ["hb"]),
            nn.Node("cat", nn.Concat(2), ["ha", "hb"], ["h"]),
            nn.Node("mix", nn.Conv2d(4, 4, 3, 1, 1, rng=rng, dtype=f64), ["h"], ["m"]),
            nn.Node("act", nn.Sigmoid(), ["m"], ["s"]),
            nn.Node("split", nn.Split([2, 2]), ["s"], ["ya", "yb"]),
            nn.Node("out", nn.ConvTranspose2d(2, 1, 3, 1, 1, rng=rng, dtype=f64), ["ya"], ["za"]),
        ]
        shapes = {"xa": (2, 1, 5, 5), "xb": (2, 1, 5, 5)}
        graph = nn.ModelGraph(nodes, ["xa", "xb"], ["za", "yb"], input_shapes=shapes)
    for p in graph.parameters().values():
        p += 0.1 * rng.standard_normal(p.shape)  # non-zero biases
    inputs = {k: rng.standard_normal(s) for k, s in shapes.items()}
    out_shapes = graph.infer_shapes(shapes)
    targets = {k: rng.standard_normal(out_shapes[k]) for k in graph.outputs}
    return graph, inputs, targets


def loss_and_grad(graph, inputs, targets):
    out = graph.forward(inputs)
    total, grads = 0.0, {}
    for k, t in targets.items():
        l, g = nn.mse_loss(out[k], t)
        total += l
        grads[k] = g
    return total, grads


def max_relative_error(graph, inputs, targets, h=1e-5):
    """Largest per-tensor ||analytic - numeric|| / max(||analytic||, ||numeric||)."""
    _, grads = loss_and_grad(graph, inputs, targets)
    graph.backward(grads)
    analytic = {k: v.copy() for k, v in graph.gradients().items()}
    worst = 0.0
    for key, p in graph.parameters().items():
        num = np.zeros_like(p)
        flat, nflat = p.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp, _ = loss_and_grad(graph, inputs, targets)
            flat[i] = old - h
            lm, _ = loss_and_grad(graph, inputs, targets)
            flat[i] = old
            nflat[i] = (lp - lm) / (2 * h)
        denom = max(np.linalg.norm(analytic[key]), np.linalg.norm(num), 1e-12)
        worst = max(worst, np.linalg.norm(analytic[key] - num) / denom)
    return worst
