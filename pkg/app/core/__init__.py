# Core application components