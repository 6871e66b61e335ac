"""Spatial dual discrete diffusion on a synthetic lattice micro-world.

Three coupled categorical diffusion models (image tiles, text tokens, scene-graph
codes) share a 3D scene-graph latent and are trained under dual learning.  The
package is self-contained: arrays are numpy, gradients come from a small
reverse-mode tape in ``sd3.numerics``, and every random draw flows through a
seeded PCG32 stream so runs are reproducible bit for bit.
"""

__version__ = "0.1.0"
