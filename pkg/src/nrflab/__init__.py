import logging

from rich.logging import RichHandler

from .constants import LOG_LEVEL

logging.basicConfig(
    level=logging.WARNING,
    format="[%(name)s] %(message)s",
    datefmt="[%X]",
    handlers=[
        RichHandler(
            show_path=True,
            rich_tracebacks=False,
            tracebacks_show_locals=True,
            tracebacks_code_width=120,
        )
    ],
)
logging.getLogger("nrflab").setLevel(LOG_LEVEL)
for logger_name in ["httpx", "httpcore", "numexpr"]:
    logging.getLogger(logger_name).setLevel(logging.WARNING)
