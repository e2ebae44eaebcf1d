# fedsim_contribution_ledger/utils/logging.py
"""
Logging configuration manager for the federated contribution simulator.
Implements a configurable logging system with:
  - Rotating file logs with size limits (10MB, 5 backups)
  - Console output with customizable levels
  - Timestamp-based log files
  - UTF-8 encoding support

Configuration options via config:
    logging:
        console_level: Minimum level for console output
        file_level: Minimum level for file output
        format: Log message format string
    output_dir: logs are written to <output_dir>/logs

Usage:
    manager = LoggingManager(config)
    manager.setup_logging()
    logger = LoggingManager.getLogger(__name__)
    logger.info("Message")
"""
import logging
from logging.handlers import RotatingFileHandler
from datetime import datetime
from pathlib import Path
from typing import Dict, Union, Optional
import traceback

from fedsim_contribution_ledger.utils.config import ExperimentConfig, resolve_output_dir

class LoggingManager:
    def __init__(self, config: Union[Dict, ExperimentConfig]):
        """Initialize LoggingManager with config."""
        self.config = config if isinstance(config, ExperimentConfig) else ExperimentConfig(**config)

    @classmethod
    def getLogger(cls, name: str) -> logging.Logger:
        """Get a logger instance."""
        return logging.getLogger(name)

    def setup_logging(self) -> Optional[Path]:
        """Initialize and configure logging system with rotation.

        Returns the log file path, or None if the fallback config was used.
        """
        try:
            timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
            log_dir = resolve_output_dir(self.config) / 'logs'
            log_dir.mkdir(parents=True, exist_ok=True)

            root_logger = logging.getLogger()
            root_logger.setLevel(logging.DEBUG)
            root_logger.handlers.clear()

            file_handler = self._create_file_handler(log_dir, timestamp)
            root_logger.addHandler(file_handler)
            root_logger.addHandler(self._create_console_handler())

            log_file = log_dir / f"debug_{timestamp}.log"
            logger = logging.getLogger(__name__)
            logger.info(f"Logging initialized - writing to {log_file}")
            logger.debug("Debug logging enabled")
            return log_file

        except Exception as e:
            # Fallback to basic configuration
            logging.basicConfig(
                level=logging.INFO,
                format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
            )
            logger = logging.getLogger(__name__)
            logger.error(f"Error setting up logging: {str(e)}")
            logger.debug(traceback.format_exc())
            return None

    def _create_file_handler(self, log_dir: Path, timestamp: str) -> logging.Handler:
        """Create rotating file handler with detailed formatting."""
        log_file = log_dir / f"debug_{timestamp}.log"
        file_handler = RotatingFileHandler(
            log_file,
            maxBytes=10*1024*1024,  # 10MB per file
            backupCount=5,
            encoding='utf-8'
        )
        file_handler.setLevel(getattr(logging, self.config.logging.file_level))
        file_handler.setFormatter(logging.Formatter(self.config.logging.format))
        return file_handler

    def _create_console_handler(self) -> logging.Handler:
        """Create console handler with standard formatting."""
        console_handler = logging.StreamHandler()
        console_handler.setLevel(getattr(logging, self.config.logging.console_level))
        console_handler.setFormatter(logging.Formatter('%(message)s'))
        return console_handler
