"""Centroidal walking on a humanoid with flexible hips: gait MPC, tube stabilizer,
deflection estimation and a reduced flexible plant to try them on."""

__version__ = "0.1.0"
