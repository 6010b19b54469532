"""Desk-scale industrial spill-detection toolkit.

Submodules:
  geometry    IoU, hit rates, threshold sweeps, AP, uplift
  datasets    COCO/YOLO parsing, conversion, dedup, splits
  masks       feathered soft-mask rendering
  diffusion   scene/inpaint job orchestration over an HTTP backend
  vlm         structured prompting, chat backend, robust output parsing
  lora        tensor container + low-rank adapter merging
  evaluation  evaluation harness and report rendering
  monitor     frame ingestion, alerting, webhook dispatch
  annotation  expert annotation service (Stage-2 backend)
  config      shared configuration and class registry
  cli         command-line entry point
"""

__version__ = "0.1.0"
