# Tests init file
