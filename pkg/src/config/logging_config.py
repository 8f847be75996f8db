import logging
import sys
import os

def setup_logging(stream=None):
    """Configure logging for the application"""
    log_level = os.getenv("LOG_LEVEL", "INFO").upper()

    detailed_formatter = logging.Formatter(
        '[%(asctime)s] %(levelname)s [%(name)s.%(funcName)s:%(lineno)d] %(message)s'
    )

    # the CLI passes stderr so stdout carries only emitted results
    console_handler = logging.StreamHandler(stream or sys.stdout)
    console_handler.setFormatter(detailed_formatter)

    root_logger = logging.getLogger()
    root_logger.setLevel(log_level)
    # setup_logging may run from both the CLI and the API app
    if not any(getattr(h, "_bertperf", False) for h in root_logger.handlers):
        console_handler._bertperf = True
        root_logger.addHandler(console_handler)

    loggers = {
        "bertperf": log_level,
        "bertperf.config": log_level,
        "bertperf.opgraph": log_level,
        "bertperf.roofline": log_level,
        "bertperf.parallel": log_level,
        "bertperf.whatif": log_level,
        "bertperf.lambref": log_level,
        "bertperf.report": log_level,
        "uvicorn": log_level,
        "uvicorn.access": log_level,
        "httpx": "WARNING",
    }

    for logger_name, level in loggers.items():
        logger = logging.getLogger(logger_name)
        logger.setLevel(level)

    return logging.getLogger("bertperf")
