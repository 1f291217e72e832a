/** DOM rendering for the console: a plain re-render of the view state into
 * a handful of regions.  No framework, no virtual DOM. */

import { type ConsoleState, currentMotion } from "./viewmodel.js";

export interface Regions {
  status: HTMLElement;
  scene: HTMLElement;
  motion: HTMLElement;
  log: HTMLElement;
}

function poseLine(name: string, pose: number[]): string {
  return `${name}: [${pose.map((v) => v.toFixed(3)).join(", ")}]`;
}

export function render(state: ConsoleState, regions: Regions): void {
  const last = state.steps[state.steps.length - 1];
  const bits = [`phase: ${state.phase}`];
  if (last) bits.push(`step ${last.step}`, `stage ${last.stage}`);
  if (state.intervening) bits.push("INTERVENING");
  if (state.correctedSteps) bits.push(`${state.correctedSteps} corrected steps`);
  if (state.done) {
    bits.push(state.done.success ? "SUCCESS" : "FAILED");
  }
  if (state.savedPath) bits.push(`saved to ${state.savedPath}`);
  regions.status.textContent = bits.join(" | ");

  regions.scene.textContent = last
    ? Object.entries(last.poses)
        .map(([name, pose]) => poseLine(name, pose))
        .join("\n")
    : "(no state yet)";

  const motion = currentMotion(state);
  const lines: string[] = [];
  if (motion) lines.push(`executing: ${motion}`);
  if (last) lines.push(`policy predicts next: ${last.predicted_motion}`);
  if (state.pendingRequery) {
    lines.push(`requery - policy would now do: ${state.pendingRequery}`);
  }
  regions.motion.textContent = lines.join("\n") || "(idle)";

  regions.log.textContent = state.log.slice(-200).join("\n");
  regions.log.scrollTop = regions.log.scrollHeight;
}
