"""Compare analytic gradients with central differences on random instances."""

from mmcl import LOSSES, verify_gradient

# instances that sit near a kink (truncation, clamp, margin, rank swap) are resampled
for name in LOSSES:
    rep = verify_gradient(name, trials=10, seed=1)
    print(f"{name:8s} max rel err {rep.max_rel_error:.2e}  resampled {rep.boundary_resamples:2d}"
          f"  {'ok' if rep.passed else 'FAILED'}")
