"""From a board image to labelled ball crops.

A synthetic board stands in for an X-ray: bright solder balls on a darker
substrate, with one ball hidden under a dark occluder.  The extractor finds
the visible balls, fills the grid gap by interpolation and template
matching, and cuts 64x64 crops.  Two crops then get painted voids so the
LoG labeller has something to find.

    python demos/extract_and_label.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from voidseg.extraction import REFINED, extract_balls, extract_crops
from voidseg.groundtruth import classify_ball
from voidseg.imaging import save_image
from voidseg.synth import BoardSpec, VoidParams, render_voids, synthesize_board

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")

spec = BoardSpec(rows=4, cols=6, pitch=80, r_ball=20, jitter=2, noise_sigma=2, edge_blur=1, occluded=[(2, 3)], seed=1)
board, truth = synthesize_board(spec)
grid = extract_balls(board)
print(f"board {board.shape[1]}x{board.shape[0]}: {len(grid.balls)} balls, r_mode {grid.r_mode:.1f}, "
      f"pitch {grid.d_ref_h:.1f} x {grid.d_ref_v:.1f}")  # fmt: skip
for b in grid.balls:
    if b.source == REFINED:
        t = truth.balls[b.row_id * spec.cols + b.col_id]
        print(f"  ball ({b.row_id}, {b.col_id}) recovered by template search, "
              f"{np.hypot(b.cx - t.cx, b.cy - t.cy):.2f} px from truth")  # fmt: skip

crops = extract_crops(board, grid)

# paint one clear void and one only 5 grey levels above the ball, which the
# LoG step floor already ignores
strong = VoidParams(1, [5], [12], [0.0], [1.0], [crops[0].cx + 4], [crops[0].cy - 3])
faint = VoidParams(1, [5], [5], [0.0], [0.0], [crops[1].cx], [crops[1].cy])
rng = np.random.default_rng(0)
crops[0].image[:] = render_voids(crops[0].image, (crops[0].cx, crops[0].cy, crops[0].ball.r), strong, rng).image
crops[1].image[:] = render_voids(crops[1].image, (crops[1].cx, crops[1].cy, crops[1].ball.r), faint, rng).image

for k, c in enumerate(crops[:3]):
    lab = classify_ball(c.image, (c.cx, c.cy, c.ball.r), ball_id=f"ball{k}")
    contrasts = ", ".join(f"{r.contrast:+.1f}" for r in lab.regions) or "none"
    print(f"crop {k}: {lab.cls:<8} closed contours {len(lab.regions)}, contrasts {contrasts}")

out.mkdir(parents=True, exist_ok=True)
save_image(board, out / "board.png")
print(f"board written to {out / 'board.png'}")
