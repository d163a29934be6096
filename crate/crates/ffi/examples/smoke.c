#include <stdio.h>
#include "exmvit.h"

int main(void) {
    ExmvitAuditTotals t;
    if (exmvit_audit("exmvit-928", &t) != EXMVIT_STATUS_OK) {
        fprintf(stderr, "%s\n", exmvit_last_error());
        return 1;
    }
    printf("strict %zu paper-convention %zu baseline %zu width %zu\n",
           t.strict_total, t.paper_convention_total, t.baseline_total, t.classifier_width);

    ExmvitModel *m = NULL;
    if (exmvit_model_build("exmvit-928-tiny", 0, &m) != EXMVIT_STATUS_OK) {
        fprintf(stderr, "%s\n", exmvit_last_error());
        return 1;
    }
    static float image[3 * 64 * 64];
    for (size_t i = 0; i < sizeof image / sizeof *image; i++)
        image[i] = 0.5f;
    float logits[8];
    ExmvitStatus s = exmvit_infer(m, image, sizeof image / sizeof *image, logits, 8);
    printf("infer status %d, logit[0] %g\n", (int)s, logits[0]);
    exmvit_model_free(m);
    return s == EXMVIT_STATUS_OK ? 0 : 1;
}
