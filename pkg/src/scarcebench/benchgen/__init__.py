from .build import build_manifest, split_summary
from .geometry import center_form, enlarge_and_jitter, find_jitter_range, ratio_assign
from .raw import RawAnnotationSet, RawCategory, RawImage, RawObject, RawParseError, load_raw
from .splits import assign_subsets, filter_categories, novel_val_size, pad_hierarchy, split_base_novel

__all__ = [
    "RawAnnotationSet",
    "RawCategory",
    "RawImage",
    "RawObject",
    "RawParseError",
    "assign_subsets",
    "build_manifest",
    "center_form",
    "enlarge_and_jitter",
    "filter_categories",
    "find_jitter_range",
    "load_raw",
    "novel_val_size",
    "pad_hierarchy",
    "ratio_assign",
    "split_base_novel",
    "split_summary",
]
