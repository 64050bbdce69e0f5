import os
from pathlib import Path

from dotenv import load_dotenv


load_dotenv()


OVT_THREADS = max(1, int(os.getenv("OVT_THREADS", "1")))
OVT_LOG_LEVEL = os.getenv("OVT_LOG_LEVEL", "INFO").upper()


BASE_DIR = Path(__file__).resolve().parent
TEMPLATES_DIR = BASE_DIR / "templates"

PROMPT_TEMPLATE = (
    "Write a short description for the image, "
    "noting that the main instance of the image is a {category}."
)
ZERO_SHOT_TEMPLATE = "a photo of {category}"
CAPTION_TEMPLATE = "a photo of a {category}, seen from viewpoint {view_id}"

TEXT_BUCKETS = 64
TEXT_HASH_SALT = b"ovt-bag-of-tok"

NEAREST_NEIGHBORS = 5
ANCHOR_WEIGHT_FLOOR = 1e-8
NORM_FLOOR = 1e-12
LAYER_NORM_EPS = 1e-5
TEMPERATURE_BOUNDS = (1e-3, 10.0)
ONE_EQUIVALENT_BETA = 1.0 - 1e-9

MULTIVIEW_FILE = "multiview.jsonl"
CLEAN_FILE = "clean.jsonl"
EVAL_FILE = "eval.jsonl"
METRICS_FILE = "metrics.csv"
CHECKPOINT_FILE = "checkpoint.ovt"
REPORT_FILE = "report.json"
COMPARE_FILE = "compare.csv"
ABLATION_FILE = "ablation.csv"
RESOLVED_CONFIG_FILE = "config.json"

METRICS_COLUMNS = (
    "epoch",
    "itc_loss",
    "vc_loss",
    "total_loss",
    "mean_intra_object_distance",
    "outlier_mean_distance",
    "zero_shot_top1",
    "seconds",
)
SUMMARY_COLUMNS = (
    "itc_loss",
    "vc_loss",
    "total_loss",
    "mean_intra_object_distance",
    "outlier_mean_distance",
    "zero_shot_top1",
)

CATEGORY_NAMES = (
    "hammer",
    "chair",
    "teapot",
    "bicycle",
    "guitar",
    "lamp",
    "kettle",
    "sneaker",
    "clock",
    "vase",
    "drum",
    "camera",
    "umbrella",
    "helmet",
    "violin",
    "toaster",
)
