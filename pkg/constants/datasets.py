MNIST_BASE_URL = "https://storage.googleapis.com/cvdf-datasets/mnist/"

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte.gz",
    "train_labels": "train-labels-idx1-ubyte.gz",
    "test_images": "t10k-images-idx3-ubyte.gz",
    "test_labels": "t10k-labels-idx1-ubyte.gz",
}

MNIST_SHAPE = (28, 28, 1)
MNIST_CLASS_COUNT = 10

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049

CSV_COLUMNS = {
    "certify": ["sample_id", "true_label", "predicted", "p_lower", "radius"],
    "mc_certify": ["sample_id", "true_label", "predicted", "p_lower", "radius", "abstained"],
    "trace": ["layer_index", "layer_kind", "N", "trace", "min_eig", "max_diag"],
    "tightness": ["layer_index", "box_log_volume", "cov_log_volume"],
    "compare": [
        "layer_index",
        "layer_kind",
        "prop_mean_variance",
        "mc_mean_variance",
        "variance_ratio",
        "mc_max_cross_corr",
        "box_log_volume",
        "cov_log_volume",
    ],
    "metrics": ["epoch", "clean_acc", "acr", "mean_loss_c", "mean_loss_cr"],
    "gaussianity": ["sample", "channel_a", "channel_b"],
    "ellipse": ["center_a", "center_b", "semi_major", "semi_minor", "angle"],
    "crosscheck": ["sample_id", "predicted", "prop_radius", "mc_radius", "abstained", "eligible", "within_tolerance"],
    "layer_moments": ["layer_index", "layer_kind", "N", "mean_variance", "max_cross_corr", "pre_activation"],
    "cost": ["layers_back", "sigma_count", "cross_count"],
    "sweep": ["parameter", "value", "seed", "clean_acc", "acr"],
    "noisy": ["seed", "noise_rate", "naive_acc", "finetuned_acc"],
    "memory": ["height", "width", "channels", "traditional", "brute_force", "shared_covariance"],
}

COST_MODES = ("overlap", "no-overlap", "memory")
