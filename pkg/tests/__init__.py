"""Test package for the H/Ni(111) quantum diffusion simulator."""
