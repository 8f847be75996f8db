# main.py

import os

import uvicorn
from dotenv import load_dotenv

from src.config.logging_config import setup_logging

load_dotenv()
logger = setup_logging()

if __name__ == "__main__":
    port = int(os.getenv("PORT", "8000"))
    logger.info(f"Starting bertperf API on port {port}")
    uvicorn.run(
        "src.routes.api:app",
        host="0.0.0.0",
        port=port,
        reload=os.getenv("RELOAD", "false").lower() == "true",
        log_config=None,  # Disable uvicorn's default logging
    )
