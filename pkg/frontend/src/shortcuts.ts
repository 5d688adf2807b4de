/**
 * Rebindable keyboard shortcuts with local persistence.
 *
 * The storage backend is injected (localStorage in the app, a plain object
 * in tests), so the map itself stays synchronous and side-effect free.
 */

export type ShortcutAction =
  | "undo"
  | "export"
  | "toggle-largest-cc"
  | "threshold-up"
  | "threshold-down"
  | "toggle-polarity";

export interface StorageLike {
  getItem(key: string): string | null;
  setItem(key: string, value: string): void;
}

export const DEFAULT_BINDINGS: Record<ShortcutAction, string> = {
  undo: "z",
  export: "e",
  "toggle-largest-cc": "l",
  "threshold-up": "]",
  "threshold-down": "[",
  "toggle-polarity": "x",
};

const STORAGE_KEY = "edgeflow.shortcuts";

export class ShortcutMap {
  private bindings: Record<ShortcutAction, string>;

  constructor(private readonly storage: StorageLike | null = null) {
    this.bindings = { ...DEFAULT_BINDINGS };
    const persisted = storage?.getItem(STORAGE_KEY);
    if (persisted) {
      try {
        const parsed = JSON.parse(persisted) as Partial<Record<ShortcutAction, string>>;
        for (const action of Object.keys(this.bindings) as ShortcutAction[]) {
          const key = parsed[action];
          if (typeof key === "string" && key.length > 0) {
            this.bindings[action] = key;
          }
        }
      } catch {
        // corrupted persisted state falls back to defaults
      }
    }
  }

  keyFor(action: ShortcutAction): string {
    return this.bindings[action];
  }

  resolve(key: string): ShortcutAction | null {
    for (const [action, bound] of Object.entries(this.bindings)) {
      if (bound === key) return action as ShortcutAction;
    }
    return null;
  }

  /** Rebind an action; refuses keys already used by another action. */
  rebind(action: ShortcutAction, key: string): void {
    if (key.length === 0) throw new Error("shortcut key must be non-empty");
    const owner = this.resolve(key);
    if (owner !== null && owner !== action) {
      throw new Error(`key "${key}" is already bound to ${owner}`);
    }
    this.bindings[action] = key;
    this.persist();
  }

  reset(): void {
    this.bindings = { ...DEFAULT_BINDINGS };
    this.persist();
  }

  snapshot(): Record<ShortcutAction, string> {
    return { ...this.bindings };
  }

  private persist(): void {
    this.storage?.setItem(STORAGE_KEY, JSON.stringify(this.bindings));
  }
}
