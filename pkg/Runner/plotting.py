import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

CLASS_COLORS = {1: "tab:blue", -1: "tab:orange"}


def spread_figure(spreads, title):
    """
    Histograms of class-conditional projections, one panel per direction
    :param spreads: {panel title: DataFrame with label and projection columns}
    """
    fig, axes = plt.subplots(1, len(spreads), figsize=(5 * len(spreads), 4), squeeze=False)
    for ax, (name, frame) in zip(axes[0], spreads.items()):
        for label, color in CLASS_COLORS.items():
            values = frame.loc[frame["label"] == label, "projection"]
            ax.hist(values, bins=30, alpha=0.6, color=color, label=f"class {label:+d}")
        ax.set_title(name)
        ax.set_xlabel("projection")
        ax.legend()
    fig.suptitle(title)
    fig.tight_layout()
    return fig


def trace_figure(traces):
    """DAS mean loss against step, one line per site."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for site, trace in traces.items():
        ax.plot(trace["step"], trace["mean_loss"], label=site)
    ax.set_xlabel("step")
    ax.set_ylabel("mean loss")
    ax.set_title("DAS training loss")
    ax.legend()
    fig.tight_layout()
    return fig


def angle_scan_figure(frame):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(frame["angle"], frame["effect"], marker=".")
    ax.set_xlabel("angle (rad)")
    ax.set_ylabel("dormant projection shift")
    ax.set_title("Patch effect along the dormant direction")
    fig.tight_layout()
    return fig


def alpha_curve_figure(frame):
    fig, ax = plt.subplots(figsize=(6, 4))
    for instance, group in frame.groupby("instance"):
        ax.plot(group["alpha_sq"], group["objective"], marker="o", label=f"instance {instance}")
    ax.set_xscale("log")
    ax.set_xlabel("α²")
    ax.set_ylabel("gap variance")
    ax.legend()
    fig.tight_layout()
    return fig


def probe_figure(frame):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(frame["z"], frame["accuracy"], marker="o", label="probe")
    ax.plot(frame["z"], frame["reference_accuracy"], marker="x", linestyle="--", label="reference")
    ax.set_xscale("log")
    ax.set_xlabel("injection scale z")
    ax.set_ylabel("held-out accuracy")
    ax.legend()
    fig.tight_layout()
    return fig


def close(fig):
    plt.close(fig)
