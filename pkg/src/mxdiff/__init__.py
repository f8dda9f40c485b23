"""mxdiff: multi-expert diffusion models with frequency-specialized denoisers.

Small, self-contained, CPU-only. Eight pieces: a tensor engine with
reverse-mode autodiff (`numerics`), diffusion schedules and samplers
(`schedule`), frequency-mixing denoiser blocks (`blocks`), the assembled
U-shaped denoiser (`iunet`), multi-expert interval routing (`experts`),
Fourier-spectrum analysis and synthetic data (`spectral`), training and
evaluation (`pipeline`), and a command-line front end (`cli`).
"""

__version__ = "0.1.0"
