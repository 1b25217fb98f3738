"""Nano-drone relative-localization deployment pipeline, desk-scale.

Subsystems:
  nets     -- CNN architecture specs and static profiling (weights, MACs)
  qnn      -- three-stage 8-bit quantization and bit-exact integer inference
  deploy   -- L1/L2/DRAM tiling plans and double-buffered throughput model
  vision   -- pinhole projection, synthetic frame rendering, augmentation
  sim      -- closed-loop target-following simulation with Kalman filtering
  metrics  -- regression metrics (R^2, RMSE, MAE) and evaluation reports
"""

__version__ = "0.1.0"
