# Domain Layer