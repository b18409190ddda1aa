import os
import sys

import yaml

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from utils.logger import setup_logging, logger


def setup_directories(config: dict):
    """Ensures the results directory and the log directory named in config.yaml exist."""
    output_dir = config.get("experiment", {}).get("output_dir", "results")
    os.makedirs(output_dir, exist_ok=True)
    logger.info(f"Ensured results directory: {output_dir}")

    log_file = config.get("app", {}).get("log_file")
    if log_file and os.path.dirname(log_file):
        os.makedirs(os.path.dirname(log_file), exist_ok=True)
        logger.info(f"Ensured log directory: {os.path.dirname(log_file)}")

    # Experiment files are optional; the directory just gives them a home
    os.makedirs("experiments", exist_ok=True)
    benchmark_file = os.path.join("experiments", "benchmark.cfg")
    if not os.path.exists(benchmark_file):
        logger.info(f"Writing default experiment file {benchmark_file}")
        benchmark = config.get("benchmark", {})
        with open(benchmark_file, "w", encoding="utf-8") as f:
            f.write("# Benchmark ensemble; edit or copy, then pass with --config\n")
            for key in ("omega_max_hz", "omega0_hz", "tf_s", "dt_s", "n_off"):
                if key in benchmark:
                    f.write(f"{key}={benchmark[key]}\n")


def main():
    """Main function to load config and set up environment."""
    config_path = "config.yaml"

    try:
        with open(config_path, "r") as f:
            config = yaml.safe_load(f)
    except FileNotFoundError:
        print(f"Error: config.yaml not found at {config_path}. Please ensure it exists.")
        sys.exit(1)
    except yaml.YAMLError as e:
        print(f"Error parsing config.yaml: {e}")
        sys.exit(1)

    setup_logging(debug=config["app"]["debug"], log_level=config["app"]["log_level"])
    logger.info("Starting environment setup...")
    setup_directories(config)
    logger.info("Environment setup complete.")


if __name__ == "__main__":
    main()
