"""Simulate one clip per environment, save a contact sheet and report energy drift."""
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from padprobe.dataset import render_frame
from padprobe.sim_core import EnvContext, simulate

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

envs = {
    "plain": EnvContext.plain(),
    "border": EnvContext.border(10),
    "split": EnvContext.split(6, 96),
}
for name, env in envs.items():
    states = simulate(seed=7, env=env, n_frames=100)
    e = np.array([s.kinetic_energy() for s in states])
    print(f"{name:7s} {env.width}x{env.height}  energy {e[0]:.4f}  max drift {np.abs(e - e[0]).max():.1e}")
    # every 10th frame side by side
    row = np.concatenate([render_frame(s) for s in states[::10]], axis=1)
    Image.fromarray(row).save(out / f"{name}_strip.png")

print("strips written to", out)
