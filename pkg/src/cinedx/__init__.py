"""Two-stage cardiac cine-MR pipeline: dilated-CNN segmentation of ED/ES
slice pairs followed by Random Forest disease classification."""

__version__ = "0.1.0"

CLASS_NAMES = ("BG", "RV", "Myo", "LV")
DIAGNOSES = ("NOR", "DCM", "HCM", "MINF", "RVA")
