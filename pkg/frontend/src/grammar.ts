// Client-side mirror of the runtime's statement grammar so obvious mistakes
// are caught before they are posted. Messages and character positions match
// the engine's diagnostics; the server stays authoritative and its rejections
// are surfaced verbatim.

export interface GrammarIssue {
  message: string;
  position: number;
}

export type ValidationResult =
  | { ok: true; kinds: string[] }
  | { ok: false; issue: GrammarIssue };

const err = (message: string, position: number): ValidationResult => ({
  ok: false,
  issue: { message, position },
});

export function validateFeedback(
  text: string,
  sceneLabels: readonly string[],
  demoLabels: readonly string[],
): ValidationResult {
  const kinds: string[] = [];
  const positions: number[] = [];
  const parts = text.split(";");
  let cursor = 0;
  for (let idx = 0; idx < parts.length; idx += 1) {
    const raw = parts[idx] ?? "";
    const position = cursor;
    cursor += raw.length + 1;
    const statement = raw.trim();
    if (!statement) {
      if (idx === parts.length - 1 && kinds.length > 0) continue; // trailing ;
      return err("empty statement", position);
    }
    const tokens = statement.split(/\s+/);
    const head = tokens[0] ?? "";
    let sceneName: string | null = null;
    let demoName: string | null = null;
    if (head === "pass") {
      if (tokens.length !== 1) return err("pass takes no arguments", position);
    } else if (head === "match") {
      if (tokens.length !== 4 || tokens[2] !== "with") {
        return err("expected: match <ood-label> with <id-label>", position);
      }
      sceneName = tokens[1] ?? "";
      demoName = tokens[3] ?? "";
    } else if (head === "overlap") {
      if (tokens.length !== 3) {
        return err("expected: overlap <ood-label> <id-label>", position);
      }
      sceneName = tokens[1] ?? "";
      demoName = tokens[2] ?? "";
    } else if (head === "align-edge") {
      if (tokens.length !== 4 || (tokens[1] !== "left" && tokens[1] !== "right")) {
        return err("expected: align-edge left|right <ood-label> <id-label>", position);
      }
      sceneName = tokens[2] ?? "";
      demoName = tokens[3] ?? "";
    } else if (head === "align-vert") {
      if (tokens.length !== 4 || (tokens[1] !== "top" && tokens[1] !== "base")) {
        return err("expected: align-vert top|base <ood-label> <id-label>", position);
      }
      sceneName = tokens[2] ?? "";
      demoName = tokens[3] ?? "";
    } else {
      return err(`unknown statement '${head}'`, position);
    }
    if (sceneName !== null && !sceneLabels.includes(sceneName)) {
      return err(`unknown ood label '${sceneName}'`, position);
    }
    if (demoName !== null && !demoLabels.includes(demoName)) {
      return err(`unknown id label '${demoName}'`, position);
    }
    kinds.push(head);
    positions.push(position);
  }
  // the engine applies these to the whole description, multiplicity first
  const passes = kinds
    .map((kind, index) => (kind === "pass" ? index : -1))
    .filter((index) => index >= 0);
  if (passes.length > 1) {
    return err("at most one pass statement is allowed", positions[passes[1] ?? 0] ?? 0);
  }
  if (passes.length === 1 && passes[0] !== kinds.length - 1) {
    return err("pass must be the final statement", positions[passes[0] ?? 0] ?? 0);
  }
  return { ok: true, kinds };
}
