import logging

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: str = "info") -> None:
    """Configure root logging once per process"""
    logging.basicConfig(level=level.upper(), format=LOG_FORMAT, force=True)
    # uvicorn's access log is noisy at scrape frequency
    logging.getLogger("uvicorn.access").setLevel(logging.WARNING)
    logging.getLogger("httpx").setLevel(logging.WARNING)
