# Application Layer