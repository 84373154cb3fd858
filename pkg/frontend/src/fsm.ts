/**
 * Client-side mirror of the engine's instance lifecycle, used to enable or
 * disable controls without a round trip.  The engine remains authoritative;
 * this only avoids offering commands that would be rejected with 409.
 */

export type Command =
  | "start"        // PUT state running
  | "stop"         // PUT state stopping
  | "abandon"      // PUT state abandoned
  | "purge"        // DELETE instance
  | "patch-context"  // PATCH dataelements/endpoints/attributes
  | "patch-model";   // PUT model / PATCH positions

const COMMAND_STATES: Record<Command, readonly string[]> = {
  start: ["ready", "stopped"],
  stop: ["running"],
  abandon: ["ready", "running", "stopping", "stopped"],
  purge: ["running", "abandoned"],
  "patch-context": ["ready", "stopped"],
  "patch-model": ["ready", "stopped"],
};

export function allowedCommands(state: string): Command[] {
  return (Object.keys(COMMAND_STATES) as Command[]).filter((c) =>
    COMMAND_STATES[c].includes(state),
  );
}

export function isAllowed(command: Command, state: string): boolean {
  return COMMAND_STATES[command].includes(state);
}

/** States in which an instance will never change again. */
export const FINAL_STATES: readonly string[] = [
  "finished",
  "abandoned",
  "purged",
];
