"""A 2-cell grid with 2 trials; prints the markdown table it writes."""
import sys
from pathlib import Path

from padprobe.probe import DataSource, parse_grid_spec, run_grid

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "grid"
grid = parse_grid_spec("dataset=simb input=fixed_random,all_ones padding=reflect bias=on")
data = DataSource(None, train_videos=10, test_videos=5)
run_grid(grid, trials=2, out_dir=out, data=data, iterations=50, feature_channels=4, progress=print)
print((out / "table.md").read_text())
