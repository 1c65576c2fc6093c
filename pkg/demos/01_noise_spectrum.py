"""White noise has a flat spectrum, so at every bin its power is about 1/(MN),
while glyph images keep most of their energy in a few low-frequency bins.
This script measures both and prints how fast each band gets corrupted along
the forward process.

    python demos/01_noise_spectrum.py
"""
import numpy as np

from diffusionlab.engine import build_schedule
from diffusionlab.experiments import spectrum_images
from diffusionlab.spectral import (band_mask, corruption_curves, dft2, scaling_slope,
                                   verify_noise_concentration)

reports = [verify_noise_concentration(n, n, 2000, seed=0) for n in (8, 16, 32, 64)]
print("grid   mean bin power   1/(MN)      max bin power   bound violations")
for r in reports:
    print(f"{r.M:>2}x{r.N:<3} {r.mean_bin_power:.4e}      {r.expected:.4e}  "
          f"{r.max_bin_power:.4e}      {r.bound_violation_rate:.4f}")
print(f"log-log slope against MN: {scaling_slope(reports):.3f}")

images = spectrum_images(100, seed=0)
mask = band_mask(16, 16, 0.2)
power = np.abs(dft2(images).coeffs) ** 2
share = power[..., mask.low].sum() / power.sum()
print(f"\nlow band holds {mask.n_low} of 256 bins and {share:.1%} of the image energy")

sched = build_schedule()
table = corruption_curves(images, sched)
lo, hi = table.ratios("low"), table.ratios("high")
print("\n   t   low ratio   high ratio")
for t in (0, 20, 100, 200, 400, 600, 800, 1000):
    print(f"{t:>4}   {lo[t]:9.3f}   {hi[t]:10.3f}")
