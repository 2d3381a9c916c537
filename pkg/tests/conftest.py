import numpy as np
import pytest

from pvstyle import flow, imaging


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_sequence(root, n_frames=5, size=48, square=16, dx=2, start=8,
                  gaps=(1, 2, 4), seed=5):
    """Synthetic test scene: a textured square translating over a textured
    background, with exact forward/backward flows for every gap in use.

    Writes ``frames/frame_%05d.png``, ``flows/*.flo`` and ``style.png``
    under ``root``; returns the paths.
    """
    root = str(root)
    gen = np.random.default_rng(seed)
    frames_dir = f"{root}/frames"
    flows_dir = f"{root}/flows"
    import os
    os.makedirs(frames_dir, exist_ok=True)
    os.makedirs(flows_dir, exist_ok=True)

    background = gen.random((size, size, 3)) * 0.6
    patch = 0.4 + gen.random((square, square, 3)) * 0.6
    y0 = size // 2 - square // 2

    def square_x(i):
        return start + dx * i

    def render(i):
        img = background.copy()
        x = square_x(i)
        img[y0:y0 + square, x:x + square] = patch
        return np.clip(img, 0.0, 1.0)

    def square_mask(i):
        mask = np.zeros((size, size), bool)
        x = square_x(i)
        mask[y0:y0 + square, x:x + square] = True
        return mask

    for i in range(n_frames):
        imaging.save_image(render(i), imaging.frame_path(frames_dir, i))

    for i in range(n_frames):
        for j in gaps:
            if i - j < 0:
                continue
            shift = dx * j
            backward = np.zeros((size, size, 2))
            backward[square_mask(i), 0] = -shift
            flow.write_flo(backward, flow.backward_flow_path(flows_dir, i, j))
            forward = np.zeros((size, size, 2))
            forward[square_mask(i - j), 0] = shift
            flow.write_flo(forward, flow.forward_flow_path(flows_dir, i, j))

    style = gen.random((size, size, 3))
    imaging.save_image(style, f"{root}/style.png")
    return {
        "frames": frames_dir,
        "flows": flows_dir,
        "style": f"{root}/style.png",
        "size": size,
        "n_frames": n_frames,
    }
